// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear and MLP probes and the layer/head sweeps built on them.

mod linear;
mod metrics;
mod mlp;
mod sweep;

pub use linear::LinearProbe;
pub use metrics::{Confusion, ProbeMetrics, SelectionMetric};
pub use mlp::MlpProbe;
pub use sweep::{
    best_per_construct, cell_seed, sweep_heads, sweep_layers, sweep_layers_concat, BestCell, CellOutcome,
    FeatureMode, SweepResult, SweepRow,
};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

/// Probe hyperparameters.
///
/// For linear probes `max_iter` bounds Newton iterations and `tolerance` is
/// the gradient-norm stopping rule. For MLP probes `max_iter` is the number
/// of epochs and training stops early once the mean training loss drops
/// below `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    /// Penalty `l2 / (2 n) * ||W||^2`; biases are not penalized.
    pub l2: f64,
    pub standardize: bool,
    pub hidden: Vec<usize>,
    pub max_iter: usize,
    pub tolerance: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig::linear()
    }
}

impl ProbeConfig {
    pub fn linear() -> Self {
        ProbeConfig {
            kind: ProbeKind::Linear,
            l2: 1.0,
            standardize: true,
            hidden: vec![64, 64],
            max_iter: 500,
            tolerance: 1e-6,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: crate::seed::DEFAULT_SEED,
        }
    }

    pub fn mlp() -> Self {
        ProbeConfig {
            kind: ProbeKind::Mlp,
            max_iter: 200,
            tolerance: 1e-4,
            ..ProbeConfig::linear()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if self.kind == ProbeKind::Mlp && (self.batch_size == 0 || !(self.learning_rate > 0.0)) {
            return Err(Error::Config("MLP probes need batch_size >= 1 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

/// Train-set z-scoring. Constant columns keep scale 1 so they map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Scaler {
    fn fit(x: ArrayView2<f64>, standardize: bool) -> Self {
        let d = x.ncols();
        if !standardize {
            return Scaler {
                mean: Array1::zeros(d),
                scale: Array1::ones(d),
            };
        }
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(d);
        for row in x.rows() {
            for ((v, &xi), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (xi - m) * (xi - m);
            }
        }
        let scale = var.mapv(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        Scaler { mean, scale }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

/// A trained probe of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Linear(LinearProbe),
    Mlp(MlpProbe),
}

impl Probe {
    /// `P(high)` per row.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array1<f64> {
        match self {
            Probe::Linear(p) => p.predict_proba(x),
            Probe::Mlp(p) => p.predict_proba(x),
        }
    }

    /// Label 1 iff `P(high) > 0.5`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<u8> {
        self.predict_proba(x).iter().map(|&p| u8::from(p > 0.5)).collect()
    }
}

fn check_training_data(x: ArrayView2<f64>, y: &[u8]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch(format!("{} rows vs {} labels", x.nrows(), y.len())));
    }
    if y.len() < 4 {
        return Err(Error::LengthMismatch(format!("need at least 4 training rows, got {}", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::LengthMismatch(format!("label {bad} is not binary")));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::SingleClass);
    }
    check_finite(x)
}

fn check_finite(x: ArrayView2<f64>) -> Result<()> {
    for row in x.rows() {
        if let Some(column) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFeatures { column });
        }
    }
    Ok(())
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z) - y z`, the logistic loss of one logit.
pub(crate) fn logistic_loss(z: f64, y: f64) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

/// Trains a probe of `cfg.kind`.
pub fn train_probe(x: ArrayView2<f64>, y: &[u8], cfg: &ProbeConfig) -> Result<Probe> {
    match cfg.kind {
        ProbeKind::Linear => train_linear_probe(x, y, cfg).map(Probe::Linear),
        ProbeKind::Mlp => train_mlp_probe(x, y, cfg).map(Probe::Mlp),
    }
}

pub fn train_linear_probe(x: ArrayView2<f64>, y: &[u8], cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    check_training_data(x, y)?;
    Ok(linear::fit(x, y, cfg))
}

pub fn train_mlp_probe(x: ArrayView2<f64>, y: &[u8], cfg: &ProbeConfig) -> Result<MlpProbe> {
    cfg.validate()?;
    check_training_data(x, y)?;
    mlp::fit(x, y, cfg)
}

/// Test-set metrics at threshold 0.5.
pub fn evaluate(probe: &Probe, x: ArrayView2<f64>, y: &[u8]) -> Result<ProbeMetrics> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch(format!("{} rows vs {} labels", x.nrows(), y.len())));
    }
    check_finite(x)?;
    ProbeMetrics::from_predictions(y, &probe.predict(x))
}

pub(crate) fn labels_as_f64(y: &[u8]) -> Array1<f64> {
    y.iter().map(|&v| v as f64).collect()
}
