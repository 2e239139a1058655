//! Deterministic inputs shared by the benchmarks.

use hfm_core::encodings::Timestamp;
use hfm_core::mae::{ModelConfig, PatchBatch};
use hfm_core::numerics::Tensor;

/// Smooth pseudo-random values in `[-1, 1]`.
pub fn filled(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| (i as f64 * 0.618_034).sin())
}

pub fn values(n: usize) -> Vec<f64> {
    filled(&[n]).data().to_vec()
}

pub fn patch_batch(cfg: &ModelConfig, b: usize) -> PatchBatch {
    let inputs = filled(&[b, cfg.timesteps, cfg.bands, cfg.image_size, cfg.image_size]);
    let timestamps = (0..b)
        .map(|i| {
            (0..cfg.timesteps)
                .map(|k| Timestamp::from_calendar(2021, 150 + i as u32, 700 + 15 * k as u32, 0).unwrap())
                .collect()
        })
        .collect();
    PatchBatch::new(inputs, timestamps).unwrap()
}
