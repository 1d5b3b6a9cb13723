// SPDX-License-Identifier: MIT OR Apache-2.0

//! Final-token activation extraction from the built-in transformer.

use rayon::prelude::*;

use crate::activation_store::{ActivationSet, LabelTable, TapKind};
use crate::error::{Error, Result};
use crate::micro_transformer::{format_prompt, Model, TapBundle};

/// Activation sets in the order the taps were requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub sets: Vec<ActivationSet>,
    /// Reviews that lost bytes to the context limit.
    pub truncated: usize,
    pub n_samples: usize,
}

impl Extraction {
    pub fn truncated_fraction(&self) -> f64 {
        if self.n_samples == 0 {
            0.0
        } else {
            self.truncated as f64 / self.n_samples as f64
        }
    }

    pub fn get(&self, tap: TapKind) -> Option<&ActivationSet> {
        self.sets.iter().find(|s| s.tap() == tap)
    }
}

fn flatten(bundle: &TapBundle, tap: TapKind, out: &mut Vec<f32>) {
    let values: Box<dyn Iterator<Item = &f64>> = match tap {
        TapKind::HeadPreProjection => Box::new(bundle.head_pre_proj.iter()),
        TapKind::PostAttentionResidual => Box::new(bundle.post_attn_residual.iter()),
        TapKind::PostMlpResidual => Box::new(bundle.post_mlp_residual.iter()),
    };
    out.extend(values.map(|&v| v as f32));
}

/// Runs one forward pass per `(id, text)` and reads every requested tap at
/// the last prompt token. The model is only read.
pub fn extract(model: &Model, samples: &[(String, String)], taps: &[TapKind]) -> Result<Extraction> {
    if taps.is_empty() {
        return Err(Error::Usage("no tap kinds requested".into()));
    }
    let mut wanted: Vec<TapKind> = Vec::new();
    for &t in taps {
        if !wanted.contains(&t) {
            wanted.push(t);
        }
    }
    let cfg = model.config();
    let bundles = samples
        .par_iter()
        .map(|(id, text)| {
            let wrap = |e| Error::Sample {
                id: id.clone(),
                source: Box::new(e),
            };
            let prompt = format_prompt(text, cfg.max_context).map_err(wrap)?;
            let (_, taps) = model.forward_with_taps(&prompt.tokens).map_err(wrap)?;
            Ok((taps, prompt.dropped > 0))
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = samples.iter().map(|(id, _)| id.clone()).collect();
    let truncated = bundles.iter().filter(|(_, t)| *t).count();
    let mut sets = Vec::with_capacity(wanted.len());
    for tap in wanted {
        let (heads, dim) = match tap {
            TapKind::HeadPreProjection => (cfg.n_heads, cfg.head_dim()),
            _ => (1, cfg.model_dim),
        };
        let mut data = Vec::with_capacity(samples.len() * cfg.n_layers * heads * dim);
        for (b, _) in &bundles {
            flatten(b, tap, &mut data);
        }
        sets.push(ActivationSet::new(model.name(), tap, cfg.n_layers, heads, dim, ids.clone(), data)?);
    }
    let out = Extraction {
        sets,
        truncated,
        n_samples: samples.len(),
    };
    log::info!(
        "extracted {} samples; {} truncated to fit the context ({:.2}%)",
        out.n_samples,
        out.truncated,
        100.0 * out.truncated_fraction()
    );
    Ok(out)
}

/// [`extract`] over the `(id, text)` pairs of a label table.
pub fn extract_labeled(model: &Model, table: &LabelTable, taps: &[TapKind]) -> Result<Extraction> {
    let samples: Vec<(String, String)> = table.records().iter().map(|r| (r.id.clone(), r.text.clone())).collect();
    extract(model, &samples, taps)
}
