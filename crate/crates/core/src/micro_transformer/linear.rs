// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bias-free projections with an optional low-rank adapter.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;

/// Trainable `scale * B A` delta on a frozen weight.
///
/// `a` is `rank x in`, `b` is `out x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub scale: f64,
    pub dropout: f64,
}

/// `y = x W^T (+ scale * dropout(x) A^T B^T)`; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLinear {
    pub weight: Array2<f64>,
    pub lora: Option<LoraAdapter>,
}

/// What the backward pass needs from a training-mode forward.
#[derive(Debug)]
pub(crate) struct LinearCache {
    /// Dropout mask already scaled by `1 / (1 - p)`; `None` when inactive.
    mask: Option<Array2<f64>>,
    /// Adapter input after dropout.
    xd: Option<Array2<f64>>,
    /// `xd A^T`.
    u: Option<Array2<f64>>,
}

impl ProjectionLinear {
    pub fn new(weight: Array2<f64>) -> Self {
        ProjectionLinear { weight, lora: None }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Inference forward; adapter dropout is off.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(lora) = &self.lora {
            let u = x.dot(&lora.a.t());
            y.scaled_add(lora.scale, &u.dot(&lora.b.t()));
        }
        y
    }

    /// Training forward. With `rng` present, adapter dropout is sampled.
    pub(crate) fn forward_train<R: Rng>(&self, x: ArrayView2<f64>, rng: Option<&mut R>) -> (Array2<f64>, LinearCache) {
        let mut y = x.dot(&self.weight.t());
        let Some(lora) = &self.lora else {
            return (
                y,
                LinearCache {
                    mask: None,
                    xd: None,
                    u: None,
                },
            );
        };
        let (mask, xd) = match rng {
            Some(rng) if lora.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - lora.dropout);
                let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
                    if rng.random::<f64>() < lora.dropout {
                        0.0
                    } else {
                        keep
                    }
                });
                let xd = &x * &mask;
                (Some(mask), xd)
            }
            _ => (None, x.to_owned()),
        };
        let u = xd.dot(&lora.a.t());
        y.scaled_add(lora.scale, &u.dot(&lora.b.t()));
        (
            y,
            LinearCache {
                mask,
                xd: Some(xd),
                u: Some(u),
            },
        )
    }

    /// Returns `dx`; accumulates adapter gradients into `grads = (dA, dB)`.
    pub(crate) fn backward(
        &self,
        dy: ArrayView2<f64>,
        cache: &LinearCache,
        grads: Option<(&mut Array2<f64>, &mut Array2<f64>)>,
    ) -> Array2<f64> {
        let mut dx = dy.dot(&self.weight);
        if let (Some(lora), Some(xd), Some(u)) = (&self.lora, &cache.xd, &cache.u) {
            let g = dy.dot(&lora.b); // T x r
            if let Some((da, db)) = grads {
                db.scaled_add(lora.scale, &dy.t().dot(u));
                da.scaled_add(lora.scale, &g.t().dot(xd));
            }
            let mut dxd = g.dot(&lora.a);
            dxd *= lora.scale;
            if let Some(mask) = &cache.mask {
                Zip::from(&mut dxd).and(mask).for_each(|d, &m| *d *= m);
            }
            dx += &dxd;
        }
        dx
    }
}
