//! Weighted random negative sampling over the item catalog.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Catalog;
use crate::error::{Error, Result};

/// Draws distinct items with probability proportional to
/// `exposure_count^beta` (beta = 0 gives the uniform distribution).
pub struct NegativeSampler {
    /// Cumulative weights over catalog rows.
    cum: Vec<f64>,
    /// Rows with positive weight.
    eligible: Vec<usize>,
}

impl NegativeSampler {
    pub fn new(catalog: &Catalog, beta: f64) -> Self {
        let mut cum = Vec::with_capacity(catalog.len());
        let mut eligible = Vec::new();
        let mut acc = 0.0;
        for (i, info) in catalog.items.iter().enumerate() {
            let w = if beta == 0.0 {
                1.0
            } else {
                (info.exposure_count as f64).powf(beta)
            };
            if w > 0.0 {
                eligible.push(i);
            }
            acc += w;
            cum.push(acc);
        }
        NegativeSampler { cum, eligible }
    }

    /// `count` distinct items, none in `exclude`, deterministic for a fixed
    /// rng state.
    pub fn sample(
        &self,
        count: usize,
        exclude: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let total = *self.cum.last().unwrap_or(&0.0);
        if total <= 0.0 {
            return Err(Error::data("no items with positive sampling weight"));
        }
        let mut picked = Vec::with_capacity(count);
        let mut seen: std::collections::HashSet<usize> =
            exclude.iter().copied().collect();
        let max_attempts = 20 * count + 200;
        for _ in 0..max_attempts {
            if picked.len() == count {
                break;
            }
            let r = rng.gen_range(0.0..total);
            let idx = self.cum.partition_point(|&c| c <= r);
            if seen.insert(idx) {
                picked.push(idx);
            }
        }
        if picked.len() < count {
            // Dense fallback: enumerate what is actually available.
            let mut remaining: Vec<usize> = self
                .eligible
                .iter()
                .copied()
                .filter(|i| !seen.contains(i))
                .collect();
            let needed = count - picked.len();
            if remaining.len() < needed {
                return Err(Error::data(format!(
                    "cannot sample {} negatives: only {} items available",
                    count,
                    picked.len() + remaining.len()
                )));
            }
            for _ in 0..needed {
                let j = rng.gen_range(0..remaining.len());
                picked.push(remaining.swap_remove(j));
            }
        }
        Ok(picked)
    }
}

/// One-shot form of [`NegativeSampler::sample`].
pub fn sample_negatives(
    catalog: &Catalog,
    count: usize,
    exclude: &[usize],
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::config("negative sample count must be >= 1"));
    }
    NegativeSampler::new(catalog, beta).sample(count, exclude, rng)
}
