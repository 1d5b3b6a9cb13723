// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-cell probe sweeps over a layer x head grid.
//!
//! Every cell trains with its own seed, derived from the base probe seed and
//! the cell coordinates, and results are collected in grid order. A sweep is
//! therefore identical under any thread count.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_probe, ProbeConfig, ProbeMetrics, SelectionMetric};
use crate::activation_store::{ActivationSet, SplitAssignment, TapKind};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// What one grid cell's features are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// One `(layer, head)` head vector.
    PerHead,
    /// One residual vector per layer.
    PerLayer,
    /// All heads of a layer concatenated.
    ConcatenatedHeads,
}

/// Outcome of one cell. Failures are kept so holes in a sweep stay visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellOutcome {
    Ok(ProbeMetrics),
    Failed(String),
}

impl CellOutcome {
    pub fn metrics(&self) -> Option<&ProbeMetrics> {
        match self {
            CellOutcome::Ok(m) => Some(m),
            CellOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub target: String,
    pub tap: TapKind,
    pub mode: FeatureMode,
    pub n_layers: usize,
    /// 1 for layer sweeps.
    pub n_heads: usize,
    /// Row-major `(layer, head)`.
    pub cells: Vec<CellOutcome>,
    pub split_seed: u64,
    pub config: ProbeConfig,
}

/// Seed for the probe at `(layer, head)`.
pub fn cell_seed(base: u64, layer: usize, head: usize) -> u64 {
    derive_seed(base, &format!("probe/{layer}/{head}"))
}

impl SweepResult {
    pub fn cell(&self, layer: usize, head: usize) -> &CellOutcome {
        &self.cells[layer * self.n_heads + head]
    }

    /// `None` marks failed cells.
    pub fn metric_grid(&self, metric: SelectionMetric) -> Array2<Option<f64>> {
        Array2::from_shape_fn((self.n_layers, self.n_heads), |(l, h)| {
            self.cell(l, h).metrics().map(|m| m.get(metric))
        })
    }

    /// Highest `metric` over successful cells; ties go to the smallest
    /// `(layer, head)`.
    pub fn best(&self, metric: SelectionMetric) -> Option<(usize, usize, ProbeMetrics)> {
        let mut best: Option<(usize, usize, ProbeMetrics)> = None;
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                if let Some(m) = self.cell(l, h).metrics() {
                    if best.as_ref().is_none_or(|(_, _, b)| m.get(metric) > b.get(metric)) {
                        best = Some((l, h, *m));
                    }
                }
            }
        }
        best
    }

    /// Per layer, the best `metric` over its heads.
    pub fn layer_curve(&self, metric: SelectionMetric) -> Vec<Option<f64>> {
        (0..self.n_layers)
            .map(|l| {
                (0..self.n_heads)
                    .filter_map(|h| self.cell(l, h).metrics().map(|m| m.get(metric)))
                    .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            })
            .collect()
    }

    pub fn rows(&self) -> Vec<SweepRow> {
        let mut rows = Vec::with_capacity(self.cells.len());
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                let mut row = SweepRow {
                    construct: self.target.clone(),
                    tap: self.tap.as_str().to_string(),
                    layer: l,
                    head: h,
                    accuracy: None,
                    f1_low: None,
                    f1_high: None,
                    macro_f1: None,
                    weighted_f1: None,
                    tp: None,
                    fp: None,
                    fn_: None,
                    tn: None,
                    error: None,
                };
                match self.cell(l, h) {
                    CellOutcome::Ok(m) => {
                        row.accuracy = Some(m.accuracy);
                        row.f1_low = Some(m.f1_low);
                        row.f1_high = Some(m.f1_high);
                        row.macro_f1 = Some(m.macro_f1);
                        row.weighted_f1 = Some(m.weighted_f1);
                        row.tp = Some(m.confusion.tp);
                        row.fp = Some(m.confusion.fp);
                        row.fn_ = Some(m.confusion.fn_);
                        row.tn = Some(m.confusion.tn);
                    }
                    CellOutcome::Failed(e) => row.error = Some(e.clone()),
                }
                rows.push(row);
            }
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One line of a sweep CSV. Metric columns are empty for failed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub construct: String,
    pub tap: String,
    pub layer: usize,
    pub head: usize,
    pub accuracy: Option<f64>,
    pub f1_low: Option<f64>,
    pub f1_high: Option<f64>,
    pub macro_f1: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub tp: Option<usize>,
    pub fp: Option<usize>,
    #[serde(rename = "fn")]
    pub fn_: Option<usize>,
    pub tn: Option<usize>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn read_all<R: Read>(input: R) -> Result<Vec<SweepRow>> {
        let mut r = csv::Reader::from_reader(input);
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    pub fn metric(&self, metric: SelectionMetric) -> Option<f64> {
        match metric {
            SelectionMetric::Accuracy => self.accuracy,
            SelectionMetric::MacroF1 => self.macro_f1,
            SelectionMetric::WeightedF1 => self.weighted_f1,
            SelectionMetric::F1High => self.f1_high,
            SelectionMetric::F1Low => self.f1_low,
        }
    }
}

fn check_inputs(acts: &ActivationSet, labels: &[u8], split: &SplitAssignment) -> Result<()> {
    let n = acts.n_samples();
    if labels.len() != n {
        return Err(Error::LengthMismatch(format!("{} labels for {n} samples", labels.len())));
    }
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(&split.test) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::LengthMismatch(format!(
                "split index {i} is out of range or repeated for {n} samples"
            )));
        }
    }
    if split.test.is_empty() {
        return Err(Error::LengthMismatch("split has an empty test partition".into()));
    }
    Ok(())
}

fn gather(acts: &ActivationSet, rows: &[usize], layer: usize, heads: &[usize]) -> Array2<f64> {
    let d = acts.dim();
    let mut x = Array2::zeros((rows.len(), d * heads.len()));
    for (r, &i) in rows.iter().enumerate() {
        for (k, &h) in heads.iter().enumerate() {
            for (j, &v) in acts.vector(i, layer, h).iter().enumerate() {
                x[[r, k * d + j]] = v as f64;
            }
        }
    }
    x
}

fn probe_cell(x_train: ArrayView2<f64>, y_train: &[u8], x_test: ArrayView2<f64>, y_test: &[u8], cfg: &ProbeConfig) -> CellOutcome {
    match train_probe(x_train, y_train, cfg).and_then(|p| evaluate(&p, x_test, y_test)) {
        Ok(m) => CellOutcome::Ok(m),
        Err(e) => CellOutcome::Failed(e.to_string()),
    }
}

fn run(
    acts: &ActivationSet,
    labels: &[u8],
    split: &SplitAssignment,
    cfg: &ProbeConfig,
    mode: FeatureMode,
) -> Result<SweepResult> {
    cfg.validate()?;
    check_inputs(acts, labels, split)?;
    let y_train: Vec<u8> = split.train.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<u8> = split.test.iter().map(|&i| labels[i]).collect();
    let (n_layers, n_heads) = match mode {
        FeatureMode::PerHead => (acts.n_layers(), acts.n_heads()),
        _ => (acts.n_layers(), 1),
    };
    let all_heads: Vec<usize> = (0..acts.n_heads()).collect();
    let cells = (0..n_layers * n_heads)
        .into_par_iter()
        .map(|c| {
            let (l, h) = (c / n_heads, c % n_heads);
            let heads: &[usize] = match mode {
                FeatureMode::PerHead => std::slice::from_ref(&all_heads[h]),
                FeatureMode::PerLayer => &all_heads[..1],
                FeatureMode::ConcatenatedHeads => &all_heads,
            };
            let x_train = gather(acts, &split.train, l, heads);
            let x_test = gather(acts, &split.test, l, heads);
            let cell_cfg = ProbeConfig {
                seed: cell_seed(cfg.seed, l, h),
                ..cfg.clone()
            };
            probe_cell(x_train.view(), &y_train, x_test.view(), &y_test, &cell_cfg)
        })
        .collect();
    Ok(SweepResult {
        target: split.target.clone(),
        tap: acts.tap(),
        mode,
        n_layers,
        n_heads,
        cells,
        split_seed: split.seed,
        config: cfg.clone(),
    })
}

/// One probe per `(layer, head)` on head activations.
pub fn sweep_heads(acts: &ActivationSet, labels: &[u8], split: &SplitAssignment, cfg: &ProbeConfig) -> Result<SweepResult> {
    if acts.tap() != TapKind::HeadPreProjection {
        return Err(Error::Shape(format!("sweep_heads needs head activations, got `{}`", acts.tap())));
    }
    run(acts, labels, split, cfg, FeatureMode::PerHead)
}

/// One probe per layer on residual activations.
pub fn sweep_layers(acts: &ActivationSet, labels: &[u8], split: &SplitAssignment, cfg: &ProbeConfig) -> Result<SweepResult> {
    if !acts.tap().is_residual() {
        return Err(Error::Shape(format!("sweep_layers needs a residual tap, got `{}`", acts.tap())));
    }
    run(acts, labels, split, cfg, FeatureMode::PerLayer)
}

/// One probe per layer on the concatenation of that layer's head outputs.
pub fn sweep_layers_concat(
    acts: &ActivationSet,
    labels: &[u8],
    split: &SplitAssignment,
    cfg: &ProbeConfig,
) -> Result<SweepResult> {
    if acts.tap() != TapKind::HeadPreProjection {
        return Err(Error::Shape(format!(
            "concatenated-head sweeps need head activations, got `{}`",
            acts.tap()
        )));
    }
    run(acts, labels, split, cfg, FeatureMode::ConcatenatedHeads)
}

/// Best cell of one construct's sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub construct: String,
    pub metric: SelectionMetric,
    pub value: f64,
    pub layer: usize,
    pub head: usize,
    pub metrics: ProbeMetrics,
}

/// Best cell per sweep under `metric`, sorted by descending value. Equal
/// values keep input order.
pub fn best_per_construct(sweeps: &[SweepResult], metric: SelectionMetric) -> Result<Vec<BestCell>> {
    let first = sweeps.first().ok_or_else(|| Error::GridMismatch("no sweeps given".into()))?;
    let mut table = Vec::with_capacity(sweeps.len());
    for s in sweeps {
        if (s.tap, s.mode, s.n_layers, s.n_heads) != (first.tap, first.mode, first.n_layers, first.n_heads) {
            return Err(Error::GridMismatch(format!(
                "sweep `{}` is {}x{} `{}`, expected {}x{} `{}`",
                s.target, s.n_layers, s.n_heads, s.tap, first.n_layers, first.n_heads, first.tap
            )));
        }
        let (layer, head, metrics) = s
            .best(metric)
            .ok_or_else(|| Error::GridMismatch(format!("every cell of sweep `{}` failed", s.target)))?;
        table.push(BestCell {
            construct: s.target.clone(),
            metric,
            value: metrics.get(metric),
            layer,
            head,
            metrics,
        });
    }
    table.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(table)
}
