use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use super::scene::PatchSample;
use crate::encodings::Timestamp;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Indices of three distinct acquisitions from one clock hour, ascending.
///
/// A qualifying hour (holding at least three acquisitions) is chosen
/// uniformly, then three of its acquisitions uniformly without replacement.
pub fn choose_triple(timestamps: &[Timestamp], rng: &mut impl Rng) -> Result<[usize; 3]> {
    if timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Unsorted("acquisitions"));
    }
    let mut buckets: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, t) in timestamps.iter().enumerate() {
        buckets.entry(t.hour_bucket()).or_default().push(i);
    }
    let qualifying: Vec<&Vec<usize>> = buckets.values().filter(|v| v.len() >= 3).collect();
    if qualifying.is_empty() {
        return Err(Error::SampleUnavailable);
    }
    let bucket = qualifying[rng.random_range(0..qualifying.len())];
    let mut picks: Vec<usize> = index::sample(rng, bucket.len(), 3).into_iter().map(|k| bucket[k]).collect();
    picks.sort_unstable();
    Ok([picks[0], picks[1], picks[2]])
}

/// Builds a three-timestep sample from time-sorted single acquisitions of
/// one location; the label of the latest chosen acquisition is kept.
pub fn sample_multi_timestep(acquisitions: &[PatchSample], rng: &mut impl Rng) -> Result<PatchSample> {
    let first = acquisitions.first().ok_or(Error::SampleUnavailable)?;
    if acquisitions.iter().any(|a| a.timesteps() != 1 || a.location != first.location) {
        return Err(Error::Contract("acquisitions must be single-step samples of one location".into()));
    }
    let ts: Vec<Timestamp> = acquisitions.iter().map(|a| a.timestamps[0]).collect();
    let picks = choose_triple(&ts, rng)?;
    let s = first.data.shape();
    let mut data = Vec::with_capacity(3 * first.data.numel());
    for &i in &picks {
        if acquisitions[i].data.shape() != s {
            return Err(Error::shape("sample_multi_timestep", acquisitions[i].data.shape(), s));
        }
        data.extend_from_slice(acquisitions[i].data.data());
    }
    let out = PatchSample {
        data: Tensor::new(vec![3, s[1], s[2], s[3]], data)?,
        timestamps: picks.iter().map(|&i| ts[i]).collect(),
        label: acquisitions[picks[2]].label.clone(),
        location: first.location.clone(),
    };
    out.validate()?;
    Ok(out)
}
