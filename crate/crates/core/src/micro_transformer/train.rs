// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adapter-only fine-tuning on the answer token.

use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::AdapterGrads;
use super::tokenizer::{format_prompt, HIGH_TOKEN, LOW_TOKEN};
use super::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::seed::rng_for;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Loss trajectory of a fine-tuning run. Losses are mean answer-token
/// cross-entropy over the dataset, evaluated without dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training (dropout-on) loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Learning rate at `step` of `total`: linear warmup over the first
/// `warmup_fraction` of steps, then cosine decay that reaches zero at `total`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warmup = (cfg.warmup_fraction * total as f64).ceil() as usize;
    if step < warmup {
        return cfg.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    cfg.learning_rate * 0.5 * (1.0 + (PI * progress).cos())
}

fn answer_token(label: u8) -> u32 {
    if label == 1 {
        HIGH_TOKEN
    } else {
        LOW_TOKEN
    }
}

fn mean_loss(model: &Model, data: &[(Vec<u32>, u32)]) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|(tokens, target)| model.loss(tokens, *target))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fine-tunes the adapters of `model` with Adam on `(review, label)` pairs.
/// Label 1 targets the `high` token, 0 the `low` token. Base weights are never
/// written.
pub fn train_lora(model: &Model, dataset: &[(String, u8)], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if model.lora_config().is_none() {
        return Err(Error::Config("train_lora needs a model with adapters applied".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let max = model.config().max_context;
    let data: Vec<(Vec<u32>, u32)> = dataset
        .iter()
        .map(|(text, label)| Ok((format_prompt(text, max)?.tokens, answer_token(*label))))
        .collect::<Result<_>>()?;

    let mut model = model.clone();
    let initial_loss = mean_loss(&model, &data)?;
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut m1: Vec<Array2<f64>> = model.adapter_tensors().iter().map(|(_, t)| Array2::zeros(t.raw_dim())).collect();
    let mut m2 = m1.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng_for(cfg.seed, "train/shuffle");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, AdapterGrads)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = rng_for(cfg.seed, &format!("train/dropout/{step}/{i}"));
                    let (tokens, target) = &data[i];
                    model.loss_and_grads(tokens, *target, Some(&mut rng))
                })
                .collect::<Result<_>>()?;
            let weight = 1.0 / batch.len() as f64;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("non-empty batch");
            let mut batch_loss = first_loss;
            for (loss, g) in iter {
                batch_loss += loss;
                grads.accumulate(&g, 1.0);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            epoch_loss += batch_loss;

            let lr = lr_at(cfg, step, total);
            let t = (step + 1) as i32;
            let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
            for (((param, g), m), v) in model
                .adapter_tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(m1.iter_mut())
                .zip(m2.iter_mut())
            {
                Zip::from(param).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    let g = g * weight;
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                });
            }
            step += 1;
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }

    let final_loss = mean_loss(&model, &data)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    Ok((
        model,
        TrainReport {
            steps: total,
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
