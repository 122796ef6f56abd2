//! Deterministic minibatch schedules.
//!
//! Each epoch is an independent Fisher-Yates shuffle of `0..n` drawn from a
//! single `ChaCha8Rng` stream seeded with `seed_from_u64(seed)`. For
//! `i = n-1` down to `1` the swap partner is `next_u64() % (i + 1)`. The
//! shuffled order is cut into consecutive batches of `batch_size`; a trailing
//! partial batch is dropped.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest batch for which the unbiased HSIC estimator is defined.
pub const MIN_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinibatchSchedule {
    pub n: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub batches: Vec<Vec<usize>>,
}

impl MinibatchSchedule {
    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch_size
    }
}

pub fn make_schedule(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Result<MinibatchSchedule> {
    if batch_size < MIN_BATCH {
        return Err(Error::Argument(format!(
            "batch size {batch_size} is below the minimum of {MIN_BATCH}"
        )));
    }
    if batch_size > n {
        return Err(Error::Argument(format!(
            "batch size {batch_size} exceeds example count {n}"
        )));
    }
    if epochs == 0 {
        return Err(Error::Argument("epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_epoch = n / batch_size;
    let mut batches = Vec::with_capacity(per_epoch * epochs);
    for _ in 0..epochs {
        let perm = shuffled_indices(n, &mut rng);
        batches.extend(
            perm.chunks_exact(batch_size)
                .map(|c| c.to_vec()),
        );
    }
    Ok(MinibatchSchedule {
        n,
        batch_size,
        epochs,
        seed,
        batches,
    })
}

/// Fisher-Yates permutation of `0..n` using the documented swap rule.
pub fn shuffled_indices(n: usize, rng: &mut impl RngCore) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    perm
}

/// Derives a per-component seed from the run seed: `seed + fnv1a64(tag)`
/// (wrapping).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let hash = tag
        .bytes()
        .fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME));
    seed.wrapping_add(hash)
}
