use serde::{Deserialize, Serialize};

use crate::encodings::Timestamp;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PATCH_SIZE: usize = 32;

/// One full acquisition over a region.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[C, H, W]`.
    pub data: Tensor,
    pub timestamp: Timestamp,
    /// `[H, W]`, 0 = ocean, 1 = land.
    pub land_mask: Tensor,
    pub cloud_mask: Option<Tensor>,
    /// Identifies the imaged region; acquisitions of one region share it.
    pub scene_id: String,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let s = self.data.shape();
        if s.len() != 3 || s[1] < PATCH_SIZE || s[2] < PATCH_SIZE {
            return Err(Error::shape("scene", s, &[PATCH_SIZE, PATCH_SIZE]));
        }
        let hw = [s[1], s[2]];
        if self.land_mask.shape() != hw || self.cloud_mask.as_ref().is_some_and(|c| c.shape() != hw) {
            return Err(Error::shape("scene_masks", self.land_mask.shape(), &hw));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub scene_id: String,
    pub tile_row: usize,
    pub tile_col: usize,
}

/// Stack of `T` co-located acquisitions of one 32×32 patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// `[T, C, 32, 32]`.
    pub data: Tensor,
    pub timestamps: Vec<Timestamp>,
    /// `[32, 32]` binary mask for the most recent acquisition.
    pub label: Option<Tensor>,
    pub location: Location,
}

impl PatchSample {
    pub fn validate(&self) -> Result<()> {
        let s = self.data.shape();
        if s.len() != 4 || s[0] != self.timestamps.len() || s[0] == 0 {
            return Err(Error::shape("patch_sample", s, &[self.timestamps.len()]));
        }
        if let Some(l) = &self.label {
            if l.shape() != [s[2], s[3]] {
                return Err(Error::shape("patch_label", l.shape(), &[s[2], s[3]]));
            }
            if let Some(&v) = l.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::NonBinary(v));
            }
        }
        for w in self.timestamps.windows(2) {
            if !(w[0] < w[1] && w[0].same_hour(&w[1])) {
                return Err(Error::Contract("timesteps must increase within one clock hour".into()));
            }
        }
        Ok(())
    }

    pub fn timesteps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn positives(&self) -> usize {
        self.label.as_ref().map_or(0, |l| l.data().iter().filter(|&&v| v == 1.0).count())
    }

    pub fn last_timestamp(&self) -> Timestamp {
        *self.timestamps.last().expect("non-empty timestamps")
    }
}

/// A tile cut from a scene with the masks used for filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub sample: PatchSample,
    pub land: Tensor,
    pub cloud: Option<Tensor>,
}

/// `[.., H, W]` → the `32×32` window at tile `(row, col)`.
pub fn crop(x: &Tensor, row: usize, col: usize) -> Result<Tensor> {
    let s = x.shape();
    let nd = s.len();
    if nd < 2 || (row + 1) * PATCH_SIZE > s[nd - 2] || (col + 1) * PATCH_SIZE > s[nd - 1] {
        return Err(Error::shape("crop", s, &[row, col]));
    }
    let (h, w) = (s[nd - 2], s[nd - 1]);
    let planes = x.numel() / (h * w);
    let mut out = Vec::with_capacity(planes * PATCH_SIZE * PATCH_SIZE);
    for p in 0..planes {
        for y in 0..PATCH_SIZE {
            let start = p * h * w + (row * PATCH_SIZE + y) * w + col * PATCH_SIZE;
            out.extend_from_slice(&x.data()[start..start + PATCH_SIZE]);
        }
    }
    let mut shape = s[..nd - 2].to_vec();
    shape.extend([PATCH_SIZE, PATCH_SIZE]);
    Tensor::new(shape, out)
}

/// Non-overlapping 32×32 tiles in row-major order; partial edge strips are
/// dropped. `label` (same extents as the scene) is cropped alongside.
pub fn tile_scene(scene: &Scene, label: Option<&Tensor>) -> Result<Vec<Tile>> {
    scene.validate()?;
    let (rows, cols) = (scene.height() / PATCH_SIZE, scene.width() / PATCH_SIZE);
    let c = scene.data.shape()[0];
    let mut tiles = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let data = crop(&scene.data, r, col)?.reshape(&[1, c, PATCH_SIZE, PATCH_SIZE])?;
            tiles.push(Tile {
                sample: PatchSample {
                    data,
                    timestamps: vec![scene.timestamp],
                    label: label.map(|l| crop(l, r, col)).transpose()?,
                    location: Location { scene_id: scene.scene_id.clone(), tile_row: r, tile_col: col },
                },
                land: crop(&scene.land_mask, r, col)?,
                cloud: scene.cloud_mask.as_ref().map(|m| crop(m, r, col)).transpose()?,
            });
        }
    }
    Ok(tiles)
}

/// Keeps tiles with any land that are not entirely cloud covered.
pub fn filter_patch(land: &Tensor, cloud: Option<&Tensor>) -> bool {
    let any_land = land.data().iter().any(|&v| v > 0.0);
    let fully_cloudy = cloud.is_some_and(|c| c.data().iter().all(|&v| v == 1.0));
    any_land && !fully_cloudy
}

/// Training split keeps only samples with at least one positive pixel;
/// other splits pass through unchanged.
pub fn fire_train_filter(samples: Vec<PatchSample>, split: &str) -> Vec<PatchSample> {
    if split != "train" {
        return samples;
    }
    samples.into_iter().filter(|s| s.positives() >= 1).collect()
}
