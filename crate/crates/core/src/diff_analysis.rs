// SPDX-License-Identifier: MIT OR Apache-2.0

//! Groupwise activation-difference maps and residual-norm curves.
//!
//! For head activations `A[i, l, h] in R^d` and a sample group `G`:
//!
//! ```text
//! mu[l, h]    = 1 / (|G| d) * sum_{i in G} sum_k |A[i, l, h][k]|
//! delta[l, h] = mu_high[l, h] - mu_low[l, h]
//! ```
//!
//! The normalized map divides by `max |delta|` over the full grid; an
//! all-zero map stays zero.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::activation_store::{ActivationSet, TapKind};
use crate::error::{Error, Result};

/// Per-(layer, head) group means and their difference.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    pub tap: TapKind,
    pub mu_high: Array2<f64>,
    pub mu_low: Array2<f64>,
    pub delta: Array2<f64>,
    pub normalized: Array2<f64>,
    pub n_high: usize,
    pub n_low: usize,
}

impl DiffMap {
    pub fn n_layers(&self) -> usize {
        self.delta.nrows()
    }

    pub fn n_heads(&self) -> usize {
        self.delta.ncols()
    }

    /// Cell with the largest `|delta|`; ties go to the smallest `(layer, head)`.
    pub fn strongest_cell(&self) -> (usize, usize) {
        argmax_abs(&self.delta)
    }

    /// One row per cell: `layer,head,mu_high,mu_low,delta,normalized`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for ((l, h), &delta) in self.delta.indexed_iter() {
            w.serialize(DiffRow {
                layer: l,
                head: h,
                mu_high: self.mu_high[[l, h]],
                mu_low: self.mu_low[[l, h]],
                delta,
                normalized: self.normalized[[l, h]],
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_to_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// One line of the diff-map CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub layer: usize,
    pub head: usize,
    pub mu_high: f64,
    pub mu_low: f64,
    pub delta: f64,
    pub normalized: f64,
}

/// Per-layer residual magnitudes for each group.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNormCurve {
    pub tap: TapKind,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub difference: Vec<f64>,
}

/// Mean per-dimension absolute activation of `group`, per `(layer, head)`.
/// Accumulates in `f64`, in sample order, so results do not depend on how
/// cells are scheduled.
pub fn mean_abs_activation(acts: &ActivationSet, group: &[usize]) -> Result<Array2<f64>> {
    if acts.tap() != TapKind::HeadPreProjection {
        return Err(Error::Shape(format!(
            "mean_abs_activation needs head activations, got `{}`",
            acts.tap()
        )));
    }
    group_mean_abs(acts, group)
}

fn group_mean_abs(acts: &ActivationSet, group: &[usize]) -> Result<Array2<f64>> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if let Some(&bad) = group.iter().find(|&&i| i >= acts.n_samples()) {
        return Err(Error::LengthMismatch(format!(
            "sample index {bad} out of range for {} samples",
            acts.n_samples()
        )));
    }
    let denom = (group.len() * acts.dim()) as f64;
    Ok(Array2::from_shape_fn((acts.n_layers(), acts.n_heads()), |(l, h)| {
        let mut sum = 0.0f64;
        for &i in group {
            sum += acts.vector(i, l, h).iter().map(|&v| (v as f64).abs()).sum::<f64>();
        }
        sum / denom
    }))
}

fn groups(acts: &ActivationSet, labels: &[u8]) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.len() != acts.n_samples() {
        return Err(Error::LengthMismatch(format!(
            "{} labels for {} samples",
            labels.len(),
            acts.n_samples()
        )));
    }
    let mut high = Vec::new();
    let mut low = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        match y {
            0 => low.push(i),
            1 => high.push(i),
            other => return Err(Error::LengthMismatch(format!("label {other} is not binary"))),
        }
    }
    if high.is_empty() || low.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok((high, low))
}

/// `delta / max |delta|`, or all zeros when every delta is zero.
pub fn normalize(delta: &Array2<f64>) -> Array2<f64> {
    let max = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Array2::zeros(delta.raw_dim());
    }
    delta.mapv(|v| v / max)
}

pub(crate) fn argmax_abs(grid: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_val = f64::NEG_INFINITY;
    for ((l, h), v) in grid.indexed_iter() {
        // Row-major order plus strict `>` keeps the smallest cell on ties.
        if v.abs() > best_val {
            best_val = v.abs();
            best = (l, h);
        }
    }
    best
}

/// The groupwise difference map of head activations. Label 1 is "high".
pub fn diff_map(acts: &ActivationSet, labels: &[u8]) -> Result<DiffMap> {
    if acts.tap() != TapKind::HeadPreProjection {
        return Err(Error::Shape(format!("diff_map needs head activations, got `{}`", acts.tap())));
    }
    let (high, low) = groups(acts, labels)?;
    let mu_high = group_mean_abs(acts, &high)?;
    let mu_low = group_mean_abs(acts, &low)?;
    let delta = &mu_high - &mu_low;
    let normalized = normalize(&delta);
    Ok(DiffMap {
        tap: acts.tap(),
        mu_high,
        mu_low,
        delta,
        normalized,
        n_high: high.len(),
        n_low: low.len(),
    })
}

/// Per-layer mean residual magnitude for each class and `high - low`.
pub fn residual_norm_diff(acts: &ActivationSet, labels: &[u8]) -> Result<ResidualNormCurve> {
    if !acts.tap().is_residual() {
        return Err(Error::Shape(format!(
            "residual_norm_diff needs a residual tap, got `{}`",
            acts.tap()
        )));
    }
    let (high, low) = groups(acts, labels)?;
    let high = group_mean_abs(acts, &high)?.column(0).to_vec();
    let low = group_mean_abs(acts, &low)?.column(0).to_vec();
    let difference = high.iter().zip(&low).map(|(h, l)| h - l).collect();
    Ok(ResidualNormCurve {
        tap: acts.tap(),
        high,
        low,
        difference,
    })
}
