// SPDX-License-Identifier: MIT OR Apache-2.0

//! ReLU MLP probe with a sigmoid output, trained by mini-batch Adam.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{labels_as_f64, logistic_loss, sigmoid, ProbeConfig, Scaler};
use crate::error::{Error, Result};
use crate::seed::rng_for;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpProbe {
    pub scaler: Scaler,
    /// `(W, b)` per layer, `W` is `out x in`. The last layer has one output.
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
    pub epochs: usize,
    /// Mean data loss (without the penalty) after the last epoch.
    pub final_loss: f64,
}

impl MlpProbe {
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let z = self.scaler.apply(x);
        logits(&self.layers, &z).mapv(sigmoid)
    }
}

fn logits(layers: &[(Array2<f64>, Array1<f64>)], x: &Array2<f64>) -> Array1<f64> {
    let mut a = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        a = a.dot(&w.t()) + b;
        if i + 1 < layers.len() {
            a.mapv_inplace(|v| v.max(0.0));
        }
    }
    a.column(0).to_owned()
}

fn mean_loss(layers: &[(Array2<f64>, Array1<f64>)], x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let s = logits(layers, x);
    s.iter().zip(y).map(|(&s, &t)| logistic_loss(s, t)).sum::<f64>() / y.len() as f64
}

pub(super) fn fit(x: ArrayView2<f64>, y: &[u8], cfg: &ProbeConfig) -> Result<MlpProbe> {
    let scaler = Scaler::fit(x, cfg.standardize);
    let z = scaler.apply(x);
    let yf = labels_as_f64(y);
    let n = z.nrows();

    let mut init = rng_for(cfg.seed, "mlp/init");
    let mut widths = vec![z.ncols()];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(1);
    // He initialization for the ReLU stack.
    let mut layers: Vec<(Array2<f64>, Array1<f64>)> = widths
        .windows(2)
        .map(|w| {
            let std = (2.0 / w[0] as f64).sqrt();
            let weight = Array2::from_shape_fn((w[1], w[0]), |_| init.sample::<f64, _>(StandardNormal) * std);
            (weight, Array1::zeros(w[1]))
        })
        .collect();
    let mut moments: Vec<_> = layers
        .iter()
        .map(|(w, b)| {
            (
                Array2::<f64>::zeros(w.raw_dim()),
                Array2::<f64>::zeros(w.raw_dim()),
                Array1::<f64>::zeros(b.len()),
                Array1::<f64>::zeros(b.len()),
            )
        })
        .collect();

    let mut shuffle = rng_for(cfg.seed, "mlp/shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let penalty = cfg.l2 / n as f64;
    let mut step = 0usize;
    let mut epochs = 0;
    let mut final_loss = mean_loss(&layers, &z, &yf);
    while epochs < cfg.max_iter && final_loss >= cfg.tolerance {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let xb = z.select(Axis(0), batch);
            let yb = yf.select(Axis(0), batch);
            let bsz = batch.len() as f64;

            let mut acts = vec![xb];
            let mut pre = Vec::with_capacity(layers.len());
            for (i, (w, b)) in layers.iter().enumerate() {
                let s = acts[i].dot(&w.t()) + b;
                let a = if i + 1 < layers.len() { s.mapv(|v| v.max(0.0)) } else { s.clone() };
                pre.push(s);
                acts.push(a);
            }
            let out = pre.last().expect("at least one layer").column(0).to_owned();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut delta = Array2::from_shape_fn((batch.len(), 1), |(r, _)| (sigmoid(out[r]) - yb[r]) / bsz);

            step += 1;
            let t = step as i32;
            let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
            for i in (0..layers.len()).rev() {
                let mut gw = delta.t().dot(&acts[i]);
                gw.scaled_add(penalty, &layers[i].0);
                let gb = delta.sum_axis(Axis(0));
                if i > 0 {
                    let mut next = delta.dot(&layers[i].0);
                    next.zip_mut_with(&pre[i - 1], |d, &s| {
                        if s <= 0.0 {
                            *d = 0.0
                        }
                    });
                    delta = next;
                }
                let (w, b) = &mut layers[i];
                let (mw, vw, mb, vb) = &mut moments[i];
                adam(w.as_slice_mut().unwrap(), gw.as_slice().unwrap(), mw.as_slice_mut().unwrap(), vw.as_slice_mut().unwrap(), cfg.learning_rate, c1, c2);
                adam(b.as_slice_mut().unwrap(), gb.as_slice().unwrap(), mb.as_slice_mut().unwrap(), vb.as_slice_mut().unwrap(), cfg.learning_rate, c1, c2);
            }
        }
        epochs += 1;
        final_loss = mean_loss(&layers, &z, &yf);
        if !final_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
    }
    Ok(MlpProbe {
        scaler,
        layers,
        epochs,
        final_loss,
    })
}

fn adam(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, c1: f64, c2: f64) {
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
}

#[cfg(test)]
mod tests {
    use super::super::{train_mlp_probe, ProbeConfig};
    use ndarray::array;

    #[test]
    fn zero_epochs_still_predicts() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]];
        let cfg = ProbeConfig {
            max_iter: 0,
            ..ProbeConfig::mlp()
        };
        let p = train_mlp_probe(x.view(), &[1, 1, 0, 0], &cfg).unwrap();
        assert_eq!(p.epochs, 0);
        assert!(p.predict_proba(x.view()).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.5, 0.2]];
        let y = [1, 1, 0, 0, 1];
        let cfg = ProbeConfig {
            max_iter: 20,
            ..ProbeConfig::mlp()
        };
        let a = train_mlp_probe(x.view(), &y, &cfg).unwrap();
        let b = train_mlp_probe(x.view(), &y, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
