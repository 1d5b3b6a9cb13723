// SPDX-License-Identifier: MIT OR Apache-2.0

//! L2-regularized logistic regression fitted by damped Newton steps.
//!
//! Objective on standardized features `z`:
//!
//! ```text
//! L(w, b) = 1/n sum_i [log(1 + e^{s_i}) - y_i s_i] + l2 / (2n) ||w||^2,  s_i = w.z_i + b
//! ```

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};

use super::{labels_as_f64, logistic_loss, sigmoid, ProbeConfig, Scaler};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub scaler: Scaler,
    pub weights: Array1<f64>,
    pub bias: f64,
    /// Newton iterations taken.
    pub iterations: usize,
    pub converged: bool,
    /// Objective and gradient norm at the returned parameters.
    pub final_loss: f64,
    pub grad_norm: f64,
    l2: f64,
}

impl LinearProbe {
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.decision(x).mapv(sigmoid)
    }

    /// Raw logits.
    pub fn decision(&self, x: ArrayView2<f64>) -> Array1<f64> {
        self.scaler.apply(x).dot(&self.weights) + self.bias
    }

    /// The training objective evaluated on `(x, y)` with this probe's scaler.
    pub fn objective(&self, x: ArrayView2<f64>, y: &[u8]) -> f64 {
        let z = self.scaler.apply(x);
        objective(&z, &labels_as_f64(y), &self.weights, self.bias, self.l2)
    }

    /// Same objective at `w = 0, b = 0`.
    pub fn zero_objective(&self, x: ArrayView2<f64>, y: &[u8]) -> f64 {
        let z = self.scaler.apply(x);
        objective(&z, &labels_as_f64(y), &Array1::zeros(self.weights.len()), 0.0, self.l2)
    }
}

fn objective(z: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>, b: f64, l2: f64) -> f64 {
    let n = z.nrows() as f64;
    let w = w.as_slice().expect("contiguous weights");
    let mut data = 0.0;
    for (row, &t) in z.rows().into_iter().zip(y) {
        data += logistic_loss(logit(row.as_slice().expect("standard layout"), w, b), t);
    }
    data / n + l2 / (2.0 * n) * w.iter().map(|v| v * v).sum::<f64>()
}

fn logit(row: &[f64], w: &[f64], b: f64) -> f64 {
    row.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + b
}

/// Objective, gradient `[db, dw]`, and Hessian in the same order, from one
/// pass over the rows.
struct Eval {
    loss: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn evaluate_at(z: &Array2<f64>, y: &Array1<f64>, w: &Array1<f64>, b: f64, l2: f64) -> Eval {
    let (n, d) = z.dim();
    let nf = n as f64;
    let ws = w.as_slice().expect("contiguous weights");
    let mut loss = 0.0;
    let mut grad = DVector::zeros(d + 1);
    // Upper triangle of the augmented Gram matrix, row-major.
    let mut h = vec![0.0; (d + 1) * (d + 1)];
    let mut aug = vec![1.0; d + 1];
    for (row, &t) in z.rows().into_iter().zip(y) {
        let row = row.as_slice().expect("standard layout");
        let s = logit(row, ws, b);
        // One exponential serves both the sigmoid and the softplus.
        let e = (-s.abs()).exp();
        let p = if s >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        loss += s.max(0.0) + e.ln_1p() - t * s;
        let r = p - t;
        let v = p * (1.0 - p);
        aug[1..].copy_from_slice(row);
        for i in 0..=d {
            grad[i] += r * aug[i];
            let vi = v * aug[i];
            if vi == 0.0 {
                continue;
            }
            let hrow = &mut h[i * (d + 1)..(i + 1) * (d + 1)];
            for j in i..=d {
                hrow[j] += vi * aug[j];
            }
        }
    }
    grad /= nf;
    for j in 0..d {
        grad[j + 1] += l2 / nf * ws[j];
    }
    let hess = DMatrix::from_fn(d + 1, d + 1, |i, j| {
        let (a, c) = if i <= j { (i, j) } else { (j, i) };
        h[a * (d + 1) + c] / nf + if i == j && i > 0 { l2 / nf } else { 0.0 }
    });
    Eval {
        loss: loss / nf + l2 / (2.0 * nf) * ws.iter().map(|v| v * v).sum::<f64>(),
        grad,
        hess,
    }
}

fn newton_direction(grad: &DVector<f64>, hess: DMatrix<f64>) -> DVector<f64> {
    let dim = hess.nrows();
    let mut jitter = 0.0;
    for _ in 0..8 {
        let h = &hess + DMatrix::identity(dim, dim) * jitter;
        if let Some(ch) = h.cholesky() {
            return ch.solve(grad);
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 100.0 };
    }
    grad.clone()
}

pub(super) fn fit(x: ArrayView2<f64>, y: &[u8], cfg: &ProbeConfig) -> LinearProbe {
    let scaler = Scaler::fit(x, cfg.standardize);
    let z = scaler.apply(x);
    let yf = labels_as_f64(y);
    let d = z.ncols();
    let mut w = Array1::zeros(d);
    let mut b = 0.0;
    let mut cur = evaluate_at(&z, &yf, &w, b, cfg.l2);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        if cur.grad.norm() <= cfg.tolerance {
            converged = true;
            break;
        }
        if iterations == cfg.max_iter {
            break;
        }
        let step = newton_direction(&cur.grad, cur.hess.clone());
        let slope = cur.grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let nb = b - t * step[0];
            let nw = Array1::from_shape_fn(d, |j| w[j] - t * step[j + 1]);
            // The full step is almost always taken, so evaluate derivatives
            // with the trial loss and keep them if it is accepted.
            let accept = if t == 1.0 {
                let trial = evaluate_at(&z, &yf, &nw, nb, cfg.l2);
                let ok = trial.loss <= cur.loss - 1e-4 * t * slope;
                if ok {
                    cur = trial;
                }
                ok
            } else {
                let trial = objective(&z, &yf, &nw, nb, cfg.l2);
                let ok = trial <= cur.loss - 1e-4 * t * slope;
                if ok {
                    cur = evaluate_at(&z, &yf, &nw, nb, cfg.l2);
                }
                ok
            };
            if accept {
                w = nw;
                b = nb;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // No decrease representable in f64; the iterate is as good as it gets.
            break;
        }
    }
    let grad_norm = cur.grad.norm();
    LinearProbe {
        scaler,
        weights: w,
        bias: b,
        iterations,
        converged,
        final_loss: cur.loss,
        grad_norm,
        l2: cfg.l2,
    }
}
