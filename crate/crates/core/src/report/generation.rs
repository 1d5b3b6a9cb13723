// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer-token classification of whole reviews, scored like a probe.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro_transformer::{Classification, Model};
use crate::probe_engine::ProbeMetrics;

/// Anything that answers `high` or `low` for a review.
pub trait ReviewClassifier: Sync {
    fn classify_review(&self, review: &str) -> Result<Classification>;
}

impl ReviewClassifier for Model {
    fn classify_review(&self, review: &str) -> Result<Classification> {
        self.classify(review)
    }
}

/// A review with its binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledReview {
    pub id: String,
    pub text: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEval {
    pub variant: String,
    /// One prediction per review, in input order.
    pub predictions: Vec<u8>,
    pub metrics: ProbeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub variants: Vec<VariantEval>,
}

/// Classifies every review with every variant. Errors name the sample.
pub fn generation_eval(variants: &[(&str, &dyn ReviewClassifier)], reviews: &[LabeledReview]) -> Result<GenerationEval> {
    let labels: Vec<u8> = reviews.iter().map(|r| r.label).collect();
    let mut out = Vec::with_capacity(variants.len());
    for (name, model) in variants {
        let predictions = reviews
            .par_iter()
            .map(|r| {
                model
                    .classify_review(&r.text)
                    .map(|c| c.label.as_binary())
                    .map_err(|e| Error::Sample {
                        id: r.id.clone(),
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<u8>>>()?;
        let metrics = ProbeMetrics::from_predictions(&labels, &predictions)?;
        out.push(VariantEval {
            variant: name.to_string(),
            predictions,
            metrics,
        });
    }
    Ok(GenerationEval {
        ids: reviews.iter().map(|r| r.id.clone()).collect(),
        labels,
        variants: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub variant: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub f1_low: f64,
    pub f1_high: f64,
}

impl GenerationEval {
    pub fn rows(&self) -> Vec<GenerationRow> {
        self.variants
            .iter()
            .map(|v| GenerationRow {
                variant: v.variant.clone(),
                accuracy: v.metrics.accuracy,
                macro_f1: v.metrics.macro_f1,
                weighted_f1: v.metrics.weighted_f1,
                f1_low: v.metrics.f1_low,
                f1_high: v.metrics.f1_high,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `id,label,<variant>...` with one column of predictions per variant.
    pub fn write_predictions_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend(self.variants.iter().map(|v| v.variant.clone()));
        w.write_record(&header)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone(), self.labels[i].to_string()];
            rec.extend(self.variants.iter().map(|v| v.predictions[i].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Accuracy, macro F1 and weighted F1 side by side per variant, then the
    /// per-class F1 scores.
    pub fn table(&self) -> String {
        let mut s = String::from("| Model | Acc. | Macro F1 | W-F1 | F1 low | F1 high |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in self.rows() {
            s.push_str(&format!(
                "| {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
                r.variant, r.accuracy, r.macro_f1, r.weighted_f1, r.f1_low, r.f1_high
            ));
        }
        s
    }
}
