use std::f64::consts::TAU;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{Location, PatchSample, Scene, PATCH_SIZE};
use crate::encodings::Timestamp;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Bands brightened by cloud.
pub const CLOUD_BANDS: RangeInclusive<usize> = 0..=2;
/// How many of the highest-index bands fire hotspots brighten.
pub const FIRE_BAND_COUNT: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub scenes: usize,
    /// Acquisitions per region, 15 minutes apart within one hour (1..=4).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Target fraction of fire pixels per scene.
    pub fire_density: f64,
    /// Target fraction of cloud-covered pixels per scene.
    pub cloud_density: f64,
    pub first_year: i32,
    pub last_year: i32,
    /// Fire brightness added to the fire bands.
    pub fire_intensity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            scenes: 8,
            frames: 4,
            height: 64,
            width: 64,
            bands: 11,
            fire_density: 0.00355,
            cloud_density: 0.1,
            first_year: 2020,
            last_year: 2024,
            fire_intensity: 2.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < PATCH_SIZE || self.width < PATCH_SIZE {
            return Err(Error::invalid(format!("scene {}×{} smaller than one patch", self.height, self.width)));
        }
        if !(1..=4).contains(&self.frames) {
            return Err(Error::invalid(format!("frames {} outside 1..=4", self.frames)));
        }
        if self.bands <= *CLOUD_BANDS.end() || self.bands < FIRE_BAND_COUNT {
            return Err(Error::invalid(format!("{} bands is too few", self.bands)));
        }
        for (name, v) in [("fire_density", self.fire_density), ("cloud_density", self.cloud_density)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.first_year > self.last_year {
            return Err(Error::invalid("first_year after last_year"));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.scenes.div_ceil(self.frames)
    }
}

/// A generated scene with its exact fire mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub scene: Scene,
    pub fire: Tensor,
}

struct Wave {
    amp: f64,
    fy: f64,
    fx: f64,
    phase: f64,
}

impl Wave {
    fn random(rng: &mut impl Rng, amp: (f64, f64), period: (f64, f64)) -> Self {
        let angle = rng.random_range(0.0..TAU);
        let k = TAU / rng.random_range(period.0..period.1);
        Wave {
            amp: rng.random_range(amp.0..amp.1),
            fy: k * angle.sin(),
            fx: k * angle.cos(),
            phase: rng.random_range(0.0..TAU),
        }
    }

    fn at(&self, y: usize, x: usize, shift: f64) -> f64 {
        self.amp * (self.fy * y as f64 + self.fx * x as f64 + self.phase + shift).sin()
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Pixels of a 1–4 pixel 4-connected cluster grown from `(y, x)`.
fn cluster(y: usize, x: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let size = rng.random_range(1..=4);
    let mut px = vec![(y, x)];
    let mut guard = 0;
    while px.len() < size && guard < 32 {
        guard += 1;
        let (cy, cx) = px[rng.random_range(0..px.len())];
        let (dy, dx) = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)][rng.random_range(0..4)];
        let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
            continue;
        }
        let p = (ny as usize, nx as usize);
        if !px.contains(&p) {
            px.push(p);
        }
    }
    px
}

fn region(cfg: &SynthConfig, r: usize) -> Result<Vec<SynthScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(r as u64 + 1);
    let (h, w, c) = (cfg.height, cfg.width, cfg.bands);
    let hw = h * w;

    // A shared surface field seen by every band through its own gain, plus
    // a weaker band-specific texture.
    let shared: Vec<Wave> = (0..4).map(|_| Wave::random(&mut rng, (0.2, 0.6), (12.0, 64.0))).collect();
    let own: Vec<Vec<Wave>> = (0..c)
        .map(|_| (0..2).map(|_| Wave::random(&mut rng, (0.02, 0.1), (8.0, 32.0))).collect())
        .collect();
    let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let land_waves: Vec<Wave> = (0..3).map(|_| Wave::random(&mut rng, (0.5, 1.0), (48.0, 160.0))).collect();
    let land_threshold = rng.random_range(-0.8..0.4);
    let land: Vec<f64> = (0..hw)
        .map(|i| {
            let v: f64 = land_waves.iter().map(|wv| wv.at(i / w, i % w, 0.0)).sum();
            f64::from(u8::from(v > land_threshold))
        })
        .collect();

    // Cloud blobs: centre, radius, drift per frame.
    let mut blobs = Vec::new();
    let cloud_target = cfg.cloud_density * hw as f64;
    let mut cover = vec![false; hw];
    let mut covered = 0usize;
    while (covered as f64) < cloud_target && blobs.len() < 10_000 {
        let blob = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(3.0..9.0));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - blob.0, x as f64 - blob.1);
                if dy * dy + dx * dx <= blob.2 * blob.2 && !cover[y * w + x] {
                    cover[y * w + x] = true;
                    covered += 1;
                }
            }
        }
        blobs.push(blob);
    }
    let drift = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));

    // Fire clusters persist across the region's frames.
    let land_px: Vec<usize> = (0..hw).filter(|&i| land[i] > 0.0).collect();
    let exact = cfg.fire_density * hw as f64;
    let budget = exact.floor() as usize + usize::from(rng.random_bool(exact.fract()));
    let mut fire = vec![0.0; hw];
    let mut fire_count = 0;
    let mut intensity = vec![0.0; hw];
    while fire_count < budget {
        let centre = if land_px.is_empty() { rng.random_range(0..hw) } else { land_px[rng.random_range(0..land_px.len())] };
        let heat = cfg.fire_intensity * rng.random_range(0.8..1.2);
        for (y, x) in cluster(centre / w, centre % w, h, w, &mut rng) {
            let i = y * w + x;
            if fire[i] == 0.0 && fire_count < budget {
                fire[i] = 1.0;
                intensity[i] = heat;
                fire_count += 1;
            }
        }
    }

    let year_span = (cfg.last_year - cfg.first_year + 1) as usize;
    let year = cfg.first_year + (r % year_span) as i32;
    let doy = rng.random_range(121..=273);
    let hour = rng.random_range(8..16);
    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let n_frames = cfg.frames.min(cfg.scenes - r * cfg.frames);
    let mut out = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let ts = Timestamp::from_calendar(year, doy, hour * 60 + 15 * k as u32, 0)?;
        let shift = 0.15 * k as f64;
        let mut cloud = vec![0.0; hw];
        for &(cy, cx, rad) in &blobs {
            let (cy, cx) = (cy + drift.0 * k as f64, cx + drift.1 * k as f64);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    if dy * dy + dx * dx <= rad * rad {
                        cloud[y * w + x] = 1.0;
                    }
                }
            }
        }
        let surface: Vec<f64> = (0..hw).map(|i| shared.iter().map(|wv| wv.at(i / w, i % w, shift)).sum()).collect();
        let mut data = vec![0.0; c * hw];
        for b in 0..c {
            let fire_band = b >= c - FIRE_BAND_COUNT;
            for i in 0..hw {
                let (y, x) = (i / w, i % w);
                let mut v = offsets[b] + gains[b] * surface[i] + own[b].iter().map(|wv| wv.at(y, x, shift)).sum::<f64>();
                if land[i] == 0.0 {
                    v -= 0.4;
                }
                if CLOUD_BANDS.contains(&b) && cloud[i] > 0.0 {
                    v += 1.5;
                }
                if fire_band {
                    v += intensity[i];
                }
                v += noise.sample(&mut rng);
                data[b * hw + i] = round32(v);
            }
        }
        out.push(SynthScene {
            scene: Scene {
                data: Tensor::new(vec![c, h, w], data)?,
                timestamp: ts,
                land_mask: Tensor::new(vec![h, w], land.clone())?,
                cloud_mask: Some(Tensor::new(vec![h, w], cloud)?),
                scene_id: format!("r{r:05}"),
            },
            fire: Tensor::new(vec![h, w], fire.clone())?,
        });
    }
    Ok(out)
}

/// Seeded synthetic scenes; regions are generated independently so the
/// output does not depend on thread scheduling.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthScene>> {
    cfg.validate()?;
    let regions: Vec<Result<Vec<SynthScene>>> = (0..cfg.regions()).into_par_iter().map(|r| region(cfg, r)).collect();
    let mut out = Vec::with_capacity(cfg.scenes);
    for r in regions {
        out.extend(r?);
    }
    Ok(out)
}

/// Whole-scene container payload: data with the fire mask as label.
pub fn scene_sample(s: &SynthScene) -> Result<PatchSample> {
    let sh = s.scene.data.shape();
    Ok(PatchSample {
        data: s.scene.data.clone().reshape(&[1, sh[0], sh[1], sh[2]])?,
        timestamps: vec![s.scene.timestamp],
        label: Some(s.fire.clone()),
        location: Location { scene_id: s.scene.scene_id.clone(), tile_row: 0, tile_col: 0 },
    })
}

/// Land and cloud masks as a two-channel container payload.
pub fn masks_sample(s: &SynthScene) -> Result<PatchSample> {
    let (h, w) = (s.scene.height(), s.scene.width());
    let mut data = s.scene.land_mask.data().to_vec();
    match &s.scene.cloud_mask {
        Some(c) => data.extend_from_slice(c.data()),
        None => data.extend(std::iter::repeat_n(0.0, h * w)),
    }
    Ok(PatchSample {
        data: Tensor::new(vec![1, 2, h, w], data)?,
        timestamps: vec![s.scene.timestamp],
        label: None,
        location: Location { scene_id: s.scene.scene_id.clone(), tile_row: 0, tile_col: 0 },
    })
}

/// Inverse of [`scene_sample`] / [`masks_sample`].
pub fn scene_from_samples(data: &PatchSample, masks: &PatchSample, scene_id: &str) -> Result<SynthScene> {
    let s = data.data.shape();
    let m = masks.data.shape();
    if s[0] != 1 || m[0] != 1 || m[1] != 2 || m[2..] != s[2..] {
        return Err(Error::shape("scene_from_samples", s, m));
    }
    let (h, w) = (s[2], s[3]);
    let md = masks.data.data();
    Ok(SynthScene {
        scene: Scene {
            data: data.data.clone().reshape(&[s[1], h, w])?,
            timestamp: data.timestamps[0],
            land_mask: Tensor::new(vec![h, w], md[..h * w].to_vec())?,
            cloud_mask: Some(Tensor::new(vec![h, w], md[h * w..].to_vec())?),
            scene_id: scene_id.to_string(),
        },
        fire: data.label.clone().unwrap_or_else(|| Tensor::zeros(&[h, w])),
    })
}
