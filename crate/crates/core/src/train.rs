//! Shared mini-batch bookkeeping: per-epoch validation hold-out, batching,
//! derived seeds and loss history.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Training rows of one epoch, split into a shuffled fitting set and a
/// held-out validation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub fit: Vec<usize>,
    pub val: Vec<usize>,
}

/// Draws `round(n * val_fraction)` validation positions out of `0..n`; the
/// rest are returned shuffled for batching.
pub fn epoch_plan<R: Rng + ?Sized>(n: usize, val_fraction: f64, rng: &mut R) -> EpochPlan {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let fit = idx.split_off(n_val);
    let mut val = idx;
    val.sort_unstable();
    EpochPlan { fit, val }
}

/// Deterministic 64-bit seed for a named stage, so stages draw from
/// independent streams.
pub fn stage_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Optimizer and schedule settings shared by the supervised stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 20,
            batch_size: 128,
            val_fraction: 0.10,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return Err("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(format!(
                "validation fraction {} outside [0, 1)",
                self.val_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}
