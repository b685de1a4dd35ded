//! Seeded 80/10/10 train/validation/test split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n` and cuts it 80/10/10 (validation and test rounded to the
/// nearest window, train takes the rest).
pub fn split_indices(n: usize, seed: u64) -> DatasetSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * 0.1).round() as usize;
    let n_test = ((n as f64 * 0.1).round() as usize).min(n - n_val);
    let test = idx.split_off(n - n_test);
    let val = idx.split_off(idx.len() - n_val);
    DatasetSplit {
        train: idx,
        val,
        test,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportions_for_500() {
        let s = split_indices(500, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (400, 50, 50));
        assert_eq!(s, split_indices(500, 1));
    }

    #[test]
    fn tiny_inputs() {
        let s = split_indices(1, 0);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 1);
        let s = split_indices(0, 0);
        assert!(s.train.is_empty());
    }
}
