// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic data with known ground truth: planted-signal activations,
//! XOR and linear feature sets, and separable toy reviews.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::activation_store::{ActivationSet, Construct, LabelRecord, LabelTable, TapKind};
use crate::error::Result;
use crate::seed::rng_for;

/// Exactly balanced labels in seeded random order.
pub fn balanced_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut y: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
    y.shuffle(rng);
    y
}

fn sample_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("sample-{i:06}")).collect()
}

/// Head activations with unit Gaussian noise everywhere and a mean shift on
/// the first `shifted_dims` coordinates of one cell for label-1 samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedHeads {
    pub n_samples: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim: usize,
    pub layer: usize,
    pub head: usize,
    pub shifted_dims: usize,
    pub shift: f32,
    pub seed: u64,
}

impl Default for PlantedHeads {
    fn default() -> Self {
        PlantedHeads {
            n_samples: 400,
            n_layers: 6,
            n_heads: 8,
            dim: 16,
            layer: 4,
            head: 3,
            shifted_dims: 8,
            shift: 1.0,
            seed: 0,
        }
    }
}

impl PlantedHeads {
    /// A fixture with no planted signal at all.
    pub fn noise(self) -> Self {
        PlantedHeads { shift: 0.0, ..self }
    }

    pub fn generate(&self) -> Result<(ActivationSet, Vec<u8>)> {
        let mut rng = rng_for(self.seed, "fixture/planted-heads");
        let labels = balanced_labels(self.n_samples, &mut rng);
        let per_sample = self.n_layers * self.n_heads * self.dim;
        let mut data = Vec::with_capacity(self.n_samples * per_sample);
        for &y in &labels {
            for l in 0..self.n_layers {
                for h in 0..self.n_heads {
                    for k in 0..self.dim {
                        let mut v: f32 = rng.sample(StandardNormal);
                        if y == 1 && (l, h) == (self.layer, self.head) && k < self.shifted_dims {
                            v += self.shift;
                        }
                        data.push(v);
                    }
                }
            }
        }
        let set = ActivationSet::new(
            "planted-heads",
            TapKind::HeadPreProjection,
            self.n_layers,
            self.n_heads,
            self.dim,
            sample_ids(self.n_samples),
            data,
        )?;
        Ok((set, labels))
    }
}

/// Residual activations whose label-1 samples carry a mean shift from
/// `from_layer` onward. Earlier layers are pure noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedResidual {
    pub n_samples: usize,
    pub n_layers: usize,
    pub dim: usize,
    pub from_layer: usize,
    pub shifted_dims: usize,
    pub shift: f32,
    pub tap: TapKind,
    pub seed: u64,
}

impl Default for PlantedResidual {
    fn default() -> Self {
        PlantedResidual {
            n_samples: 400,
            n_layers: 6,
            dim: 16,
            from_layer: 4,
            shifted_dims: 8,
            shift: 1.0,
            tap: TapKind::PostMlpResidual,
            seed: 0,
        }
    }
}

impl PlantedResidual {
    pub fn generate(&self) -> Result<(ActivationSet, Vec<u8>)> {
        let mut rng = rng_for(self.seed, "fixture/planted-residual");
        let labels = balanced_labels(self.n_samples, &mut rng);
        let mut data = Vec::with_capacity(self.n_samples * self.n_layers * self.dim);
        for &y in &labels {
            for l in 0..self.n_layers {
                for k in 0..self.dim {
                    let mut v: f32 = rng.sample(StandardNormal);
                    if y == 1 && l >= self.from_layer && k < self.shifted_dims {
                        v += self.shift;
                    }
                    data.push(v);
                }
            }
        }
        let set = ActivationSet::new(
            "planted-residual",
            self.tap,
            self.n_layers,
            1,
            self.dim,
            sample_ids(self.n_samples),
            data,
        )?;
        Ok((set, labels))
    }
}

/// XOR clusters around `(+-1, +-1)` with Gaussian jitter of width `noise`;
/// label 1 when both coordinates share a sign. Every point is paired with
/// its mirror image through the origin, so no linear rule beats chance by
/// construction.
pub fn xor_features(n_pairs: usize, noise: f64, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = rng_for(seed, "fixture/xor");
    let mut x = Array2::zeros((2 * n_pairs, 2));
    let mut y = Vec::with_capacity(2 * n_pairs);
    for i in 0..n_pairs {
        let (sx, sy) = match i % 4 {
            0 => (1.0, 1.0),
            1 => (-1.0, -1.0),
            2 => (1.0, -1.0),
            _ => (-1.0, 1.0),
        };
        let a = sx + noise * rng.sample::<f64, _>(StandardNormal);
        let b = sy + noise * rng.sample::<f64, _>(StandardNormal);
        let label = u8::from(sx * sy > 0.0);
        x[[2 * i, 0]] = a;
        x[[2 * i, 1]] = b;
        x[[2 * i + 1, 0]] = -a;
        x[[2 * i + 1, 1]] = -b;
        y.extend([label, label]);
    }
    (x, y)
}

/// Two Gaussian classes whose means differ by `shift` along every axis.
pub fn linear_features(n: usize, dim: usize, shift: f64, seed: u64) -> (Array2<f64>, Vec<u8>) {
    let mut rng = rng_for(seed, "fixture/linear");
    let y = balanced_labels(n, &mut rng);
    let x = Array2::from_shape_fn((n, dim), |(i, _)| {
        rng.sample::<f64, _>(StandardNormal) + shift * y[i] as f64
    });
    (x, y)
}

/// Thirty-two targets over a 4 x 8 grid of one-dimensional heads. Target
/// `k` is planted at cell `k` as `+-s_k/2 + U(-1, 1)`, which makes its Bayes
/// accuracy `0.51 + 0.0155 k`: strictly increasing in `k`. Every other cell is
/// independent of target `k`.
#[derive(Debug, Clone)]
pub struct GradedConstructs {
    pub acts: ActivationSet,
    /// `labels[k]` belongs to `Construct::ALL[k]`.
    pub labels: Vec<Vec<u8>>,
    /// Bayes accuracy per target.
    pub bayes_accuracy: Vec<f64>,
}

pub fn graded_constructs(n_samples: usize, seed: u64) -> Result<GradedConstructs> {
    let n_targets = Construct::ALL.len();
    let mut rng = rng_for(seed, "fixture/graded");
    let labels: Vec<Vec<u8>> = (0..n_targets).map(|_| balanced_labels(n_samples, &mut rng)).collect();
    let bayes_accuracy: Vec<f64> = (0..n_targets).map(|k| 0.51 + 0.0155 * k as f64).collect();
    let mut data = Vec::with_capacity(n_samples * n_targets);
    for i in 0..n_samples {
        for (k, acc) in bayes_accuracy.iter().enumerate() {
            let half_shift = 2.0 * acc - 1.0;
            let sign = if labels[k][i] == 1 { 1.0 } else { -1.0 };
            data.push((sign * half_shift + rng.random_range(-1.0..1.0)) as f32);
        }
    }
    let acts = ActivationSet::new("graded", TapKind::HeadPreProjection, 4, 8, 1, sample_ids(n_samples), data)?;
    Ok(GradedConstructs {
        acts,
        labels,
        bayes_accuracy,
    })
}

const GOOD_WORDS: [&str; 4] = ["honest", "reliable", "accurate", "genuine"];
const BAD_WORDS: [&str; 4] = ["fake", "scam", "broken", "misleading"];
const FILLER: [&str; 8] = ["the", "blender", "arrived", "box", "it", "was", "and", "my"];

/// Cue words per toy review. A single cue is too faint for a desk-scale
/// model to learn from 256 reviews; three are learned within 20 epochs.
pub const TOY_CUES: usize = 3;

/// Short reviews with alternating labels: three filler words and
/// [`TOY_CUES`] cue words, all from the label's side.
pub fn toy_reviews(n: usize, seed: u64) -> Vec<(String, u8)> {
    let mut rng = rng_for(seed, "fixture/reviews");
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut words: Vec<&str> = (0..3).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect();
            let cues = if label == 1 { GOOD_WORDS } else { BAD_WORDS };
            for _ in 0..TOY_CUES {
                words.insert(rng.random_range(0..=words.len()), cues[rng.random_range(0..cues.len())]);
            }
            (words.join(" "), label)
        })
        .collect()
}

/// A label table over `reviews`. Trustworthiness is 4-5 for label 1 and 1-2
/// for label 0; helpfulness agrees with it on three reviews in four; every
/// other construct is uniform on 1..=5.
pub fn label_table_for(reviews: &[(String, u8)], seed: u64) -> Result<LabelTable> {
    let mut rng = rng_for(seed, "fixture/labels");
    let records = reviews
        .iter()
        .enumerate()
        .map(|(i, (text, label))| {
            let mut raw = [0u8; 32];
            for c in Construct::ALL {
                raw[c.index()] = rng.random_range(1..=5);
            }
            let high = |rng: &mut ChaCha8Rng, yes: bool| if yes { rng.random_range(4..=5) } else { rng.random_range(1..=2) };
            raw[Construct::Trustworthiness.index()] = high(&mut rng, *label == 1);
            let agree = rng.random_range(0..4) != 0;
            raw[Construct::Helpfulness.index()] = high(&mut rng, (*label == 1) == agree);
            LabelRecord::new(format!("review-{i:06}"), text.clone(), raw)
        })
        .collect::<Result<Vec<_>>>()?;
    LabelTable::new(records)
}
