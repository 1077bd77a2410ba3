//! Train/calibration partitioning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::rng::{purpose, substream};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        Self {
            train_fraction,
            seed,
        }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(DEFAULT_TRAIN_FRACTION, seed)
    }

    /// `round(train_fraction * n)`, kept inside `1..n` so both halves exist.
    pub fn train_size(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64).round() as usize).clamp(1, n - 1)
    }
}

/// Indices of the training and calibration halves, each sorted ascending.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if n < 2 {
        return Err(DataError::TooFewRows { needed: 2, got: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(spec.seed, purpose::SPLIT));
    let n_train = spec.train_size(n);
    let mut train = idx[..n_train].to_vec();
    let mut cal = idx[n_train..].to_vec();
    train.sort_unstable();
    cal.sort_unstable();
    Ok((train, cal))
}
