use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;

/// Assignment of every sample of one subject to one of `n_folds` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub seed: u64,
    pub fold_of: Vec<usize>,
}

/// Seeded permutation of `0..n_samples`, dealt round-robin into `n_folds`
/// folds.
pub fn make_folds(n_samples: usize, n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::arg(format!("need at least 2 folds, got {n_folds}")));
    }
    if n_samples < n_folds {
        return Err(Error::arg(format!(
            "{n_samples} samples cannot fill {n_folds} folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n_samples).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n_samples];
    for (i, &s) in perm.iter().enumerate() {
        fold_of[s] = i % n_folds;
    }
    Ok(FoldAssignment {
        n_folds,
        seed,
        fold_of,
    })
}

impl FoldAssignment {
    pub fn n_samples(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// Sample indices in fold `k`, ascending.
    pub fn val_indices(&self, k: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == k)
            .collect()
    }

    /// Sample indices outside fold `k`, ascending.
    pub fn train_indices(&self, k: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != k)
            .collect()
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::validation(format!("n_folds {} < 2", self.n_folds)));
        }
        if self.fold_of.len() != n_samples {
            return Err(Error::validation(format!(
                "fold_of has {} entries for {n_samples} samples",
                self.fold_of.len()
            )));
        }
        if let Some(bad) = self.fold_of.iter().find(|&&f| f >= self.n_folds) {
            return Err(Error::validation(format!(
                "fold index {bad} >= n_folds {}",
                self.n_folds
            )));
        }
        let sizes = self.fold_sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        if hi - lo > 1 {
            return Err(Error::validation(format!(
                "unbalanced fold sizes {sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn check_fold(&self, k: usize) -> Result<()> {
        if k >= self.n_folds {
            return Err(Error::arg(format!(
                "fold {k} out of range for {} folds",
                self.n_folds
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_into_five() {
        let f = make_folds(10, 5, 3).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn nsd_subject_sizes() {
        let f = make_folds(9841, 5, 0).unwrap();
        let mut sizes = f.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1968, 1968, 1968, 1968, 1969]);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        assert_eq!(
            make_folds(100, 5, 9).unwrap(),
            make_folds(100, 5, 9).unwrap()
        );
        assert_ne!(
            make_folds(100, 5, 9).unwrap(),
            make_folds(100, 5, 10).unwrap()
        );
    }

    #[test]
    fn argument_errors() {
        assert!(make_folds(3, 5, 0).is_err());
        assert!(make_folds(10, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(n in 2usize..300, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let f = make_folds(n, k, seed).unwrap();
            f.validate(n).unwrap();
            let mut all: Vec<usize> = (0..k).flat_map(|i| f.val_indices(i)).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for i in 0..k {
                let mut both = f.train_indices(i);
                both.extend(f.val_indices(i));
                both.sort_unstable();
                prop_assert_eq!(both.len(), n);
                both.dedup();
                prop_assert_eq!(both.len(), n);
            }
        }
    }
}
