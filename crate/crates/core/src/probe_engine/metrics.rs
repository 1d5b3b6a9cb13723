// SPDX-License-Identifier: MIT OR Apache-2.0

//! Confusion counts and the F1 family. Class 1 ("high") is the positive
//! class of [`Confusion`]; the "low" view swaps roles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion matrix with `high` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(y: &[u8], y_hat: &[u8]) -> Result<Self> {
        if y.len() != y_hat.len() {
            return Err(Error::LengthMismatch(format!(
                "{} labels vs {} predictions",
                y.len(),
                y_hat.len()
            )));
        }
        let mut c = Confusion::default();
        for (&t, &p) in y.iter().zip(y_hat) {
            match (t, p) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => return Err(Error::LengthMismatch(format!("non-binary pair ({t}, {p})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same matrix with `low` as the positive class.
    pub fn flipped(&self) -> Self {
        Confusion {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    /// F1 of the positive class; 0 when the class never occurs in either
    /// labels or predictions.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Test-set quality of one probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub f1_low: f64,
    pub f1_high: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub confusion: Confusion,
}

impl ProbeMetrics {
    /// Every field is a function of the counts alone. An empty matrix yields
    /// all zeros.
    pub fn from_confusion(c: Confusion) -> Self {
        let n = c.total();
        let f1_high = c.f1();
        let f1_low = c.flipped().f1();
        let (n_high, n_low) = (c.tp + c.fn_, c.tn + c.fp);
        let (accuracy, weighted_f1) = if n == 0 {
            (0.0, 0.0)
        } else {
            (
                (c.tp + c.tn) as f64 / n as f64,
                (n_low as f64 * f1_low + n_high as f64 * f1_high) / n as f64,
            )
        };
        ProbeMetrics {
            accuracy,
            f1_low,
            f1_high,
            macro_f1: (f1_low + f1_high) / 2.0,
            weighted_f1,
            confusion: c,
        }
    }

    pub fn from_predictions(y: &[u8], y_hat: &[u8]) -> Result<Self> {
        Confusion::from_predictions(y, y_hat).map(Self::from_confusion)
    }

    pub fn get(&self, metric: SelectionMetric) -> f64 {
        match metric {
            SelectionMetric::Accuracy => self.accuracy,
            SelectionMetric::MacroF1 => self.macro_f1,
            SelectionMetric::WeightedF1 => self.weighted_f1,
            SelectionMetric::F1High => self.f1_high,
            SelectionMetric::F1Low => self.f1_low,
        }
    }
}

/// Which metric picks the "best" cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// Layer curves.
    #[default]
    Accuracy,
    /// Best-F1 tables.
    MacroF1,
    WeightedF1,
    F1High,
    F1Low,
}

impl SelectionMetric {
    pub const ALL: [SelectionMetric; 5] = [
        SelectionMetric::Accuracy,
        SelectionMetric::MacroF1,
        SelectionMetric::WeightedF1,
        SelectionMetric::F1High,
        SelectionMetric::F1Low,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMetric::Accuracy => "accuracy",
            SelectionMetric::MacroF1 => "macro_f1",
            SelectionMetric::WeightedF1 => "weighted_f1",
            SelectionMetric::F1High => "f1_high",
            SelectionMetric::F1Low => "f1_low",
        }
    }
}

impl std::fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectionMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown metric `{s}`")))
    }
}
