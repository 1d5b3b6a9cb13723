// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded, stratified 80/20 train/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Construct;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const TEST_FRACTION: f64 = 0.2;

/// Train/test partition of sample indices. Both index lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub target: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: each class contributes `round(0.2 * n_class)` test
/// samples (at least one, at most `n_class - 1`), chosen by a ChaCha8 shuffle
/// seeded with `seed`.
pub fn make_split(n: usize, seed: u64, labels: &[u8]) -> Result<SplitAssignment> {
    if n < 5 {
        return Err(Error::LengthMismatch(format!("need at least 5 samples, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::LengthMismatch(format!("label {bad} is not binary")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::Stratify {
                class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let k = ((members.len() as f64 * TEST_FRACTION).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&members[..k]);
    }
    test.sort_unstable();
    let mut in_test = vec![false; n];
    test.iter().for_each(|&i| in_test[i] = true);
    let train = (0..n).filter(|&i| !in_test[i]).collect();
    Ok(SplitAssignment {
        seed,
        target: String::new(),
        train,
        test,
    })
}

/// The per-construct split: the base seed is re-keyed with the construct
/// name so every target gets its own deterministic partition.
pub fn split_for_construct(base_seed: u64, construct: Construct, labels: &[u8]) -> Result<SplitAssignment> {
    let seed = derive_seed(base_seed, &format!("split/{}", construct.name()));
    let mut split = make_split(labels.len(), seed, labels)?;
    split.target = construct.name().to_string();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_ten() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let s = make_split(10, 7, &labels).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.test.iter().filter(|&&i| labels[i] == 1).count(), 1);
        assert_eq!(make_split(10, 7, &labels).unwrap(), s);
    }

    #[test]
    fn single_class_cannot_stratify() {
        let labels = vec![1u8; 100];
        assert!(matches!(
            make_split(100, 1, &labels),
            Err(Error::Stratify { class: 0, count: 0 })
        ));
    }

    #[test]
    fn different_seeds_differ() {
        let labels: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let differing = (0..100u64)
            .filter(|&k| {
                make_split(20, 2 * k, &labels).unwrap().test != make_split(20, 2 * k + 1, &labels).unwrap().test
            })
            .count();
        assert!(differing >= 99, "{differing}/100 differ");
    }

    proptest! {
        #[test]
        fn partition_invariants(labels in prop::collection::vec(0u8..2, 5..200), seed in any::<u64>()) {
            let n = labels.len();
            let ones = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(ones >= 2 && n - ones >= 2);
            let s = make_split(n, seed, &labels).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let target = (0.2 * n as f64).round() as i64;
            prop_assert!((s.test.len() as i64 - target).abs() <= 1);
            for class in [0u8, 1] {
                let nc = labels.iter().filter(|&&l| l == class).count();
                let tc = s.test.iter().filter(|&&i| labels[i] == class).count();
                prop_assert!((tc as f64 - 0.2 * nc as f64).abs() <= 1.0);
                prop_assert!(tc >= 1);
                prop_assert!(s.train.iter().any(|&i| labels[i] == class));
            }
        }
    }
}
