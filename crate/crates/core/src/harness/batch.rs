use crate::data::PatchSample;
use crate::error::{Error, Result};
use crate::mae::PatchBatch;
use crate::numerics::Tensor;
use crate::seg::SegBatch;

/// Stacks the selected samples into one `[B, T, C, H, W]` batch.
pub fn patch_batch(samples: &[PatchSample], idx: &[usize]) -> Result<PatchBatch> {
    let first = samples.get(*idx.first().ok_or_else(|| Error::invalid("empty batch"))?).ok_or_else(|| Error::invalid("sample index out of range"))?;
    let shape = first.data.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * first.data.numel());
    let mut timestamps = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = samples.get(i).ok_or_else(|| Error::invalid("sample index out of range"))?;
        if s.data.shape() != shape.as_slice() {
            return Err(Error::shape("patch_batch", s.data.shape(), &shape));
        }
        data.extend_from_slice(s.data.data());
        timestamps.push(s.timestamps.clone());
    }
    let mut full = vec![idx.len()];
    full.extend(&shape);
    PatchBatch::new(Tensor::new(full, data)?, timestamps)
}

pub fn seg_batch(samples: &[PatchSample], idx: &[usize]) -> Result<SegBatch> {
    let batch = patch_batch(samples, idx)?;
    let s = batch.inputs.shape();
    let (h, w) = (s[3], s[4]);
    let mut targets = Vec::with_capacity(idx.len() * h * w);
    for &i in idx {
        let label = samples[i].label.as_ref().ok_or_else(|| Error::Contract(format!("sample {i} has no label")))?;
        targets.extend_from_slice(label.data());
    }
    SegBatch::new(batch, Tensor::new(vec![idx.len(), h, w], targets)?)
}

/// Consecutive index chunks of at most `size`.
pub fn chunks(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}
