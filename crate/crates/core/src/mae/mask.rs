use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::inverse_perm;

/// Outcome of random token masking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub n_visible: usize,
    /// Permutation of token ids; the first `n_visible` are kept.
    pub shuffle: Vec<usize>,
    pub keep_ids: Vec<usize>,
    /// Inverse of `shuffle`: `shuffle[restore[i]] == i`.
    pub restore: Vec<usize>,
}

/// `ceil((1 − ratio)·n)`, with products within 1e-9 of an integer treated as
/// that integer.
pub fn visible_count(n_tokens: usize, mask_ratio: f64) -> usize {
    let x = (1.0 - mask_ratio) * n_tokens as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(n_tokens)
}

impl MaskPlan {
    pub fn from_shuffle(shuffle: Vec<usize>, n_visible: usize) -> Result<Self> {
        let n = shuffle.len();
        let mut seen = vec![false; n];
        for &i in &shuffle {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("shuffle is not a permutation of 0..{n}")));
            }
        }
        if n_visible > n {
            return Err(Error::Contract(format!("{n_visible} visible of {n} tokens")));
        }
        Ok(MaskPlan {
            n_tokens: n,
            n_visible,
            keep_ids: shuffle[..n_visible].to_vec(),
            restore: inverse_perm(&shuffle),
            shuffle,
        })
    }

    /// Every token visible, in natural order.
    pub fn all_visible(n_tokens: usize) -> Self {
        Self::from_shuffle((0..n_tokens).collect(), n_tokens).expect("identity permutation")
    }

    pub fn masked_ids(&self) -> &[usize] {
        &self.shuffle[self.n_visible..]
    }

    pub fn n_masked(&self) -> usize {
        self.n_tokens - self.n_visible
    }

    pub fn is_masked(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_tokens];
        for &i in self.masked_ids() {
            m[i] = true;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let again = Self::from_shuffle(self.shuffle.clone(), self.n_visible)?;
        if again != *self {
            return Err(Error::Contract("mask plan fields are inconsistent".into()));
        }
        Ok(())
    }
}

/// Uniform random permutation; keeps the first `ceil((1-ratio)·n)` tokens.
pub fn random_mask(n_tokens: usize, mask_ratio: f64, rng: &mut impl Rng) -> MaskPlan {
    let mut shuffle: Vec<usize> = (0..n_tokens).collect();
    shuffle.shuffle(rng);
    MaskPlan::from_shuffle(shuffle, visible_count(n_tokens, mask_ratio)).expect("shuffled identity")
}

/// Draws one mask over `per_step` tokens and repeats it for every timestep.
pub fn consistent_mask(timesteps: usize, per_step: usize, mask_ratio: f64, rng: &mut impl Rng) -> MaskPlan {
    let base = random_mask(per_step, mask_ratio, rng);
    let mut shuffle = Vec::with_capacity(timesteps * per_step);
    for t in 0..timesteps {
        shuffle.extend(base.keep_ids.iter().map(|&i| t * per_step + i));
    }
    for t in 0..timesteps {
        shuffle.extend(base.masked_ids().iter().map(|&i| t * per_step + i));
    }
    MaskPlan::from_shuffle(shuffle, timesteps * base.n_visible).expect("tiled permutation")
}
