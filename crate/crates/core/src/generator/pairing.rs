//! Random (background, mask) pairing.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BinaryMask, Manifest, SmokeSample};
use crate::error::{Error, Result};

/// One background with one mask drawn from the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPair {
    pub id: String,
    pub background: SmokeSample,
    /// Index into the mask pool.
    pub mask_index: usize,
}

impl MaskPair {
    /// The pool mask scaled to `width×height` with nearest-neighbor sampling.
    pub fn mask(&self, pool: &[BinaryMask], width: usize, height: usize) -> Result<BinaryMask> {
        let m = pool
            .get(self.mask_index)
            .ok_or_else(|| Error::invalid(format!("pair {} points past the mask pool", self.id)))?;
        Ok(m.resize_nearest(width, height))
    }
}

/// Assigns `per_background` masks to every background.
///
/// Masks are distinct within a background while the pool is large enough;
/// beyond that the extra draws repeat. The result depends only on `seed`.
pub fn pair_masks(
    backgrounds: &Manifest,
    pool_len: usize,
    per_background: usize,
    seed: u64,
) -> Result<Vec<MaskPair>> {
    if pool_len == 0 {
        return Err(Error::invalid("mask pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(backgrounds.len() * per_background);
    for bg in &backgrounds.records {
        let distinct = per_background.min(pool_len);
        let mut picks = index::sample(&mut rng, pool_len, distinct).into_vec();
        picks.extend((distinct..per_background).map(|_| rng.random_range(0..pool_len)));
        for (j, mask_index) in picks.into_iter().enumerate() {
            pairs.push(MaskPair {
                id: format!("{}-m{j}", bg.id),
                background: bg.clone(),
                mask_index,
            });
        }
    }
    Ok(pairs)
}
