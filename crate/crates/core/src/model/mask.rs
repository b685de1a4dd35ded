//! Random token masking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;

/// Sorted, unique token positions to zero out.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub indices: Vec<usize>,
    pub num_tokens: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Per-token flags.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.num_tokens];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// `floor(n·ratio)` positions drawn uniformly without replacement.
pub fn sample_mask(num_tokens: usize, ratio: f64, seed: u64) -> Result<MaskSet, ModelError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(ModelError::Config {
            field: "model.mask_ratio".into(),
            detail: format!("must lie in [0, 1), got {ratio}"),
        });
    }
    let k = (num_tokens as f64 * ratio).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, num_tokens, k).into_vec();
    indices.sort_unstable();
    Ok(MaskSet {
        indices,
        num_tokens,
        ratio,
        seed,
    })
}

/// Mixes a run seed with a step and window index into one mask seed.
pub fn mask_seed(seed: u64, step: u64, window: u64) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [step, window] {
        h = (h ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 31;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_follow_floor_rule() {
        for (n, k) in [(10, 6), (100, 60), (250, 150), (7, 4), (1, 0)] {
            assert_eq!(sample_mask(n, 0.6, 3).unwrap().len(), k);
        }
        assert!(sample_mask(10, 0.0, 0).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_set() {
        let a = sample_mask(250, 0.6, 42).unwrap();
        assert_eq!(a, sample_mask(250, 0.6, 42).unwrap());
        assert_ne!(a.indices, sample_mask(250, 0.6, 43).unwrap().indices);
        let mut u = a.indices.clone();
        u.dedup();
        assert_eq!(u.len(), a.len());
        assert!(a.indices.iter().all(|&i| i < 250));
    }

    #[test]
    fn rejects_full_ratio() {
        assert!(sample_mask(10, 1.0, 0).is_err());
    }
}
