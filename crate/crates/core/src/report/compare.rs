// SPDX-License-Identifier: MIT OR Apache-2.0

//! Base versus fine-tuned sweep comparison.

use serde::{Deserialize, Serialize};

use crate::activation_store::TapKind;
use crate::error::{Error, Result};
use crate::probe_engine::{SelectionMetric, SweepResult};

/// `ft - base` for every metric of one cell. `None` if either cell failed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub layer: usize,
    pub head: usize,
    pub accuracy: Option<f64>,
    pub f1_low: Option<f64>,
    pub f1_high: Option<f64>,
    pub macro_f1: Option<f64>,
    pub weighted_f1: Option<f64>,
}

/// Declared operationalization of "structure preserved".
pub const MIN_STRUCTURE_RHO: f64 = 0.8;
pub const MAX_PEAK_SHIFT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub target: String,
    pub tap: TapKind,
    pub deltas: Vec<CellDelta>,
    /// Per-layer best accuracy over heads.
    pub base_curve: Vec<f64>,
    pub ft_curve: Vec<f64>,
    /// Spearman correlation of the two curves.
    pub rank_correlation: f64,
    pub base_peak: usize,
    pub ft_peak: usize,
    pub base_mean_accuracy: f64,
    pub ft_mean_accuracy: f64,
    /// `rho >= 0.8` and the peaks at most two layers apart.
    pub structure_preserved: bool,
}

/// Ranks starting at 1; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho via Pearson correlation of average ranks. Two constant
/// sequences count as perfectly correlated; exactly one constant sequence
/// gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!("curves of length {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::GridMismatch("curves must be finite".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    Ok(match (va == 0.0, vb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (cov / (va * vb).sqrt()).clamp(-1.0, 1.0),
    })
}

fn peak(curve: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in curve.iter().enumerate() {
        if *v > curve[best] {
            best = i;
        }
    }
    best
}

fn complete_curve(s: &SweepResult) -> Result<Vec<f64>> {
    s.layer_curve(SelectionMetric::Accuracy)
        .into_iter()
        .enumerate()
        .map(|(l, v)| v.ok_or_else(|| Error::GridMismatch(format!("every cell of layer {l} in `{}` failed", s.target))))
        .collect()
}

pub fn compare_runs(base: &SweepResult, ft: &SweepResult) -> Result<RunComparison> {
    if (base.n_layers, base.n_heads, base.tap, base.mode) != (ft.n_layers, ft.n_heads, ft.tap, ft.mode) {
        return Err(Error::GridMismatch(format!(
            "base is {}x{} `{}`, fine-tuned is {}x{} `{}`",
            base.n_layers, base.n_heads, base.tap, ft.n_layers, ft.n_heads, ft.tap
        )));
    }
    if base.target != ft.target {
        return Err(Error::GridMismatch(format!("targets `{}` and `{}` differ", base.target, ft.target)));
    }
    let mut deltas = Vec::with_capacity(base.cells.len());
    for l in 0..base.n_layers {
        for h in 0..base.n_heads {
            let pair = base.cell(l, h).metrics().zip(ft.cell(l, h).metrics());
            let d = |m: SelectionMetric| pair.map(|(b, f)| f.get(m) - b.get(m));
            deltas.push(CellDelta {
                layer: l,
                head: h,
                accuracy: d(SelectionMetric::Accuracy),
                f1_low: d(SelectionMetric::F1Low),
                f1_high: d(SelectionMetric::F1High),
                macro_f1: d(SelectionMetric::MacroF1),
                weighted_f1: d(SelectionMetric::WeightedF1),
            });
        }
    }
    let base_curve = complete_curve(base)?;
    let ft_curve = complete_curve(ft)?;
    let rank_correlation = spearman(&base_curve, &ft_curve)?;
    let (base_peak, ft_peak) = (peak(&base_curve), peak(&ft_curve));
    let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    Ok(RunComparison {
        target: base.target.clone(),
        tap: base.tap,
        deltas,
        base_mean_accuracy: mean(&base_curve),
        ft_mean_accuracy: mean(&ft_curve),
        structure_preserved: rank_correlation >= MIN_STRUCTURE_RHO && base_peak.abs_diff(ft_peak) <= MAX_PEAK_SHIFT,
        base_curve,
        ft_curve,
        rank_correlation,
        base_peak,
        ft_peak,
    })
}
