use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::rng;

/// Highest replicate index; replicates are `0..=MAX_REPLICATE`.
pub const MAX_REPLICATE: usize = 4;

/// Smallest class count that still leaves one validation and one test class.
const MIN_CLASSES: usize = 10;

/// Class-level train/validation/test partition for one replicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub partition_seed: u64,
    pub replicate_index: usize,
    pub train_classes: Vec<u32>,
    pub val_classes: Vec<u32>,
    pub test_classes: Vec<u32>,
}

/// Partition sizes `(train, val, test)` for `total` classes at the 300:30:30 ratio.
pub fn split_sizes(total: usize) -> Result<(usize, usize, usize), DataError> {
    if total < MIN_CLASSES {
        return Err(DataError::InsufficientClasses { needed: MIN_CLASSES, found: total });
    }
    let held_out = ((total as f64) / 12.0).round().max(1.0) as usize;
    Ok((total - 2 * held_out, held_out, held_out))
}

/// Deterministic partition of `class_ids` for `(seed, replicate)`.
///
/// Every id should already be known to have both modalities.
pub fn make_splits(class_ids: &[u32], seed: u64, replicate: usize) -> Result<SplitPlan, DataError> {
    if replicate > MAX_REPLICATE {
        return Err(DataError::InvalidReplicate(replicate));
    }
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let (n_train, n_val, _) = split_sizes(ids.len())?;
    ids.shuffle(&mut rng::stream(seed, "split", replicate as u64));
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        partition_seed: seed,
        replicate_index: replicate,
        train_classes: train,
        val_classes: val,
        test_classes: test,
    })
}
