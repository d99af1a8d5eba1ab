use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DenseMatrix;

/// Independent consumers of randomness within one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamPurpose {
    Init = 1,
    Dropout = 2,
    Split = 3,
    Synthetic = 4,
    Oracle = 5,
}

/// Counter-based random streams derived from one run seed.
///
/// A stream is identified by `(purpose, index)`, so the draws seen by one
/// consumer do not depend on how many draws another consumer made.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    pub seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, purpose: StreamPurpose, index: u64) -> ChaCha8Rng {
        debug_assert!(index < 1 << 56);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 56) | index);
        rng
    }
}

/// Inverted-dropout mask: each entry is `1/keep_prob` with probability
/// `keep_prob`, else 0.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, keep_prob: f64, rng: &mut R) -> DenseMatrix {
    if keep_prob >= 1.0 {
        return DenseMatrix::filled(rows, cols, 1.0);
    }
    let scale = 1.0 / keep_prob;
    let mut m = DenseMatrix::zeros(rows, cols);
    for x in m.as_mut_slice() {
        if rng.gen::<f64>() < keep_prob {
            *x = scale;
        }
    }
    m
}

pub fn dropout_mask_seeded(rows: usize, cols: usize, keep_prob: f64, seed: u64) -> DenseMatrix {
    let mut rng = RngStreams::new(seed).stream(StreamPurpose::Dropout, 0);
    dropout_mask(rows, cols, keep_prob, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_all() {
        let m = dropout_mask_seeded(3, 4, 1.0, 9);
        assert!(m.as_slice().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn mean_of_scaled_mask_is_one() {
        let m = dropout_mask_seeded(1, 100_000, 0.5, 42);
        let mean = m.as_slice().iter().sum::<f64>() / 1e5;
        // std of the mean is 1/sqrt(1e5) ≈ 0.0032
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!(m.as_slice().iter().all(|&x| x == 0.0 || x == 2.0));
    }

    #[test]
    fn deterministic() {
        assert_eq!(dropout_mask_seeded(5, 5, 0.3, 1), dropout_mask_seeded(5, 5, 0.3, 1));
        assert_ne!(dropout_mask_seeded(5, 5, 0.3, 1), dropout_mask_seeded(5, 5, 0.3, 2));
    }

    #[test]
    fn streams_are_independent_of_call_order() {
        let s = RngStreams::new(11);
        let a: u64 = s.stream(StreamPurpose::Init, 0).gen();
        let _ = s.stream(StreamPurpose::Dropout, 3).gen::<u64>();
        let b: u64 = s.stream(StreamPurpose::Init, 0).gen();
        assert_eq!(a, b);
        let c: u64 = s.stream(StreamPurpose::Init, 1).gen();
        assert_ne!(a, c);
    }
}
