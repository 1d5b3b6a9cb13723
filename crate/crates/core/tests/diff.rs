// SPDX-License-Identifier: MIT OR Apache-2.0

use headprobe::activation_store::{ActivationSet, TapKind};
use headprobe::diff_analysis::{diff_map, mean_abs_activation, residual_norm_diff};
use headprobe::fixtures::{PlantedHeads, PlantedResidual};
use proptest::prelude::*;

/// Straight transcription of the group-mean magnitude: average over the
/// group of the per-dimension mean absolute value.
fn naive_mu(data: &[f32], dims: (usize, usize, usize, usize), group: &[usize]) -> Vec<Vec<f64>> {
    let (_, n_layers, n_heads, d) = dims;
    let mut mu = vec![vec![0.0; n_heads]; n_layers];
    for l in 0..n_layers {
        for h in 0..n_heads {
            let mut outer = 0.0;
            for &i in group {
                let mut inner = 0.0;
                for k in 0..d {
                    inner += (data[((i * n_layers + l) * n_heads + h) * d + k] as f64).abs();
                }
                outer += inner / d as f64;
            }
            mu[l][h] = outer / group.len() as f64;
        }
    }
    mu
}

fn head_set(dims: (usize, usize, usize, usize), data: Vec<f32>) -> ActivationSet {
    let (n, l, h, d) = dims;
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    ActivationSet::new("t", TapKind::HeadPreProjection, l, h, d, ids, data).unwrap()
}

fn small_tensor() -> impl Strategy<Value = ((usize, usize, usize, usize), Vec<f32>, Vec<u8>)> {
    (2usize..=4, 1usize..=4, 1usize..=4, 1usize..=8).prop_flat_map(|(n, l, h, d)| {
        let len = n * l * h * d;
        (
            Just((n, l, h, d)),
            proptest::collection::vec(-10.0f32..10.0, len),
            proptest::collection::vec(0u8..2, n - 2),
        )
            .prop_map(|(dims, data, rest)| {
                // Both classes always present.
                let mut y = vec![0, 1];
                y.extend(rest);
                (dims, data, y)
            })
    })
}

fn flipped(y: &[u8]) -> Vec<u8> {
    y.iter().map(|v| 1 - v).collect()
}

proptest! {
    #[test]
    fn matches_naive_double_loop((dims, data, y) in small_tensor()) {
        let acts = head_set(dims, data.clone());
        let map = diff_map(&acts, &y).unwrap();
        let high: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1).collect();
        let low: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 0).collect();
        let (mh, ml) = (naive_mu(&data, dims, &high), naive_mu(&data, dims, &low));
        for ((l, h), &v) in map.delta.indexed_iter() {
            prop_assert!((map.mu_high[[l, h]] - mh[l][h]).abs() <= 1e-12);
            prop_assert!((map.mu_low[[l, h]] - ml[l][h]).abs() <= 1e-12);
            prop_assert!((v - (mh[l][h] - ml[l][h])).abs() <= 1e-12);
        }
        let mu = mean_abs_activation(&acts, &high).unwrap();
        prop_assert_eq!(mu, map.mu_high.clone());
    }

    #[test]
    fn swapping_labels_negates_delta((dims, data, y) in small_tensor()) {
        let acts = head_set(dims, data);
        let a = diff_map(&acts, &y).unwrap();
        let b = diff_map(&acts, &flipped(&y)).unwrap();
        prop_assert_eq!(b.delta, a.delta.mapv(|v| -v));
        prop_assert_eq!(b.normalized, a.normalized.mapv(|v| -v));
    }

    #[test]
    fn positive_scaling_scales_delta((dims, data, y) in small_tensor(), c in 0.01f32..100.0, k in -4i32..=4) {
        let acts = head_set(dims, data);
        let base = diff_map(&acts, &y).unwrap();
        // Powers of two are exact in f32, so equivariance is exact.
        let p = 2f32.powi(k);
        let exact = diff_map(&acts.scaled(p).unwrap(), &y).unwrap();
        prop_assert_eq!(exact.delta, base.delta.mapv(|v| v * p as f64));
        prop_assert_eq!(&exact.normalized, &base.normalized);
        // Other factors pick up one f32 rounding per stored value.
        let scaled = diff_map(&acts.scaled(c).unwrap(), &y).unwrap();
        let scale = base.mu_high.iter().chain(&base.mu_low).fold(0.0f64, |m, v| m.max(*v));
        for (s, b) in scaled.delta.iter().zip(&base.delta) {
            prop_assert!((s - c as f64 * b).abs() <= 1e-6 * c as f64 * scale.max(1e-30));
        }
    }

    #[test]
    fn normalized_map_is_bounded_with_an_extreme((dims, data, y) in small_tensor()) {
        let map = diff_map(&head_set(dims, data), &y).unwrap();
        prop_assert!(map.normalized.iter().all(|v| (-1.0..=1.0).contains(v)));
        if map.delta.iter().any(|&v| v != 0.0) {
            prop_assert!(map.normalized.iter().any(|v| v.abs() == 1.0));
            let (l, h) = map.strongest_cell();
            prop_assert_eq!(map.normalized[[l, h]].abs(), 1.0);
        } else {
            prop_assert!(map.normalized.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn planted_cell_is_strongest() {
    let fixture = PlantedHeads::default();
    let (acts, y) = fixture.generate().unwrap();
    let map = diff_map(&acts, &y).unwrap();
    assert_eq!(map.strongest_cell(), (fixture.layer, fixture.head));
    assert!(map.delta[[4, 3]] > 0.0);
    assert_eq!(map.normalized[[4, 3]], 1.0);
    assert_eq!((map.n_high, map.n_low), (200, 200));
}

#[test]
fn residual_difference_appears_at_planted_layer() {
    let (acts, y) = PlantedResidual::default().generate().unwrap();
    let curve = residual_norm_diff(&acts, &y).unwrap();
    assert_eq!(curve.difference.len(), 6);
    let early = curve.difference[..4].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let late = curve.difference[4..].iter().cloned().fold(f64::INFINITY, f64::min);
    // |N(1,1)| - |N(0,1)| has mean about 0.37; half the dims are shifted.
    assert!(early < 0.05, "early layers differ by {early}");
    assert!(late > 0.12, "late layers differ by only {late}");
}

#[test]
fn residual_and_head_taps_are_kept_apart() {
    let (heads, y) = PlantedHeads::default().generate().unwrap();
    let (resid, _) = PlantedResidual::default().generate().unwrap();
    assert!(residual_norm_diff(&heads, &y).is_err());
    assert!(diff_map(&resid, &y).is_err());
}
