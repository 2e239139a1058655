use std::collections::BTreeMap;

use rand::Rng;

use super::multitime::sample_multi_timestep;
use super::scene::{filter_patch, fire_train_filter, tile_scene, Location, PatchSample};
use super::split::SplitRules;
use super::synth::SynthScene;
use crate::error::{Error, Result};

/// Tiles every scene, keeps tiles passing [`filter_patch`] and attaches the
/// fire mask as label.
pub fn tile_and_filter(scenes: &[SynthScene]) -> Result<Vec<PatchSample>> {
    let mut out = Vec::new();
    for s in scenes {
        for tile in tile_scene(&s.scene, Some(&s.fire))? {
            if filter_patch(&tile.land, tile.cloud.as_ref()) {
                out.push(tile.sample);
            }
        }
    }
    Ok(out)
}

/// One three-step sample per location that has a qualifying hour; locations
/// are visited in sorted order.
pub fn multi_timestep_samples(singles: &[PatchSample], rng: &mut impl Rng) -> Result<Vec<PatchSample>> {
    let mut by_loc: BTreeMap<&Location, Vec<&PatchSample>> = BTreeMap::new();
    for s in singles {
        by_loc.entry(&s.location).or_default().push(s);
    }
    let mut out = Vec::new();
    for group in by_loc.into_values() {
        let mut acq: Vec<PatchSample> = group.into_iter().cloned().collect();
        acq.sort_by_key(|s| s.timestamps[0]);
        match sample_multi_timestep(&acq, rng) {
            Ok(s) => out.push(s),
            Err(Error::SampleUnavailable) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Samples grouped by split name under `rules`.
pub fn split_samples(samples: Vec<PatchSample>, rules: &SplitRules) -> Result<BTreeMap<String, Vec<PatchSample>>> {
    let mut out: BTreeMap<String, Vec<PatchSample>> = BTreeMap::new();
    for s in samples {
        let name = rules.split_for_year(s.last_timestamp().year())?.to_string();
        out.entry(name).or_default().push(s);
    }
    Ok(out)
}

/// Fire segmentation splits: year-based assignment, then the positive-only
/// filter on the training split.
pub fn fire_splits(samples: Vec<PatchSample>, rules: &SplitRules) -> Result<BTreeMap<String, Vec<PatchSample>>> {
    let mut splits = split_samples(samples, rules)?;
    for (name, v) in splits.iter_mut() {
        *v = fire_train_filter(std::mem::take(v), name);
    }
    Ok(splits)
}
