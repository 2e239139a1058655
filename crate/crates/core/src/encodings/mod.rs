//! Fixed sin-cos spatial and temporal encodings plus learned spectral-group
//! embeddings.
//!
//! The temporal encoding keeps the minute of day alongside the year offset
//! and day of year, so acquisitions 15 minutes apart map to distinct vectors.

mod timestamp;

pub use timestamp::Timestamp;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;
pub const REFERENCE_YEAR: i32 = 2014;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub embed_dim: usize,
    pub base_frequency: f64,
    pub reference_year: i32,
    pub spectral_groups: usize,
}

impl EncodingConfig {
    pub fn new(embed_dim: usize) -> Self {
        EncodingConfig {
            embed_dim,
            base_frequency: DEFAULT_BASE,
            reference_year: REFERENCE_YEAR,
            spectral_groups: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "embed_dim {} must be divisible by 4 (two even spatial halves)",
                self.embed_dim
            )));
        }
        temporal_split(self.embed_dim)?;
        if self.spectral_groups == 0 {
            return Err(Error::invalid("spectral_groups must be >= 1"));
        }
        Ok(())
    }
}

/// `[sin(pos·ω_k)…, cos(pos·ω_k)…]` with `ω_k = base^(-k/(d/2))`.
pub fn sincos_1d(pos: f64, d: usize, base: f64) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::invalid(format!("sincos dimension {d} must be even")));
    }
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let omega = base.powf(-(k as f64) / half as f64);
        let a = pos * omega;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    Ok(out)
}

/// Rows for a `grid_h × grid_w` grid in row-major `(y, x)` order; each row is
/// `concat(sincos_1d(y, d/2), sincos_1d(x, d/2))`.
pub fn sincos_2d(grid_h: usize, grid_w: usize, d: usize) -> Result<Tensor> {
    sincos_2d_with_base(grid_h, grid_w, d, DEFAULT_BASE)
}

pub fn sincos_2d_with_base(grid_h: usize, grid_w: usize, d: usize, base: f64) -> Result<Tensor> {
    if !d.is_multiple_of(4) {
        return Err(Error::invalid(format!("2D sincos dimension {d} must be divisible by 4")));
    }
    let half = d / 2;
    let mut data = Vec::with_capacity(grid_h * grid_w * d);
    for y in 0..grid_h {
        let ey = sincos_1d(y as f64, half, base)?;
        for x in 0..grid_w {
            data.extend_from_slice(&ey);
            data.extend(sincos_1d(x as f64, half, base)?);
        }
    }
    Tensor::new(vec![grid_h * grid_w, d], data)
}

/// Widths allotted to (year offset, day of year, minute of day).
///
/// Each part is even; parts are equal (`d/3`) whenever `d` is divisible by 6,
/// otherwise the leading parts take the extra frequency pairs.
pub fn temporal_split(d: usize) -> Result<[usize; 3]> {
    if !d.is_multiple_of(2) || d < 6 {
        return Err(Error::invalid(format!(
            "temporal dimension {d} must be even and at least 6"
        )));
    }
    let pairs = d / 2;
    let (q, r) = (pairs / 3, pairs % 3);
    Ok([0, 1, 2].map(|i| 2 * (q + usize::from(i < r))))
}

pub fn temporal_encoding(t: &Timestamp, d: usize, cfg: &EncodingConfig) -> Result<Vec<f64>> {
    let parts = temporal_split(d)?;
    let comps = [
        (t.year() - cfg.reference_year) as f64,
        t.day_of_year() as f64,
        t.minute_of_day() as f64,
    ];
    let mut out = Vec::with_capacity(d);
    for (pos, width) in comps.into_iter().zip(parts) {
        out.extend(sincos_1d(pos, width, cfg.base_frequency)?);
    }
    Ok(out)
}

/// Learned per-group embedding table `[n_groups, d]`, drawn from N(0, 0.02²).
pub fn init_spectral_table(n_groups: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    Tensor::from_fn(&[n_groups, d], |_| normal.sample(rng))
}

pub fn spectral_group_encoding(table: &Tensor, group: usize) -> Result<Vec<f64>> {
    if table.ndim() != 2 {
        return Err(Error::shape("spectral_group_encoding", table.shape(), &[group]));
    }
    let (n, d) = (table.shape()[0], table.shape()[1]);
    if group >= n {
        return Err(Error::invalid(format!("spectral group {group} out of range 0..{n}")));
    }
    Ok(table.data()[group * d..(group + 1) * d].to_vec())
}

/// Spatial + temporal field for tokens laid out `[t][g][y][x]`:
/// shape `[T, 1, h·w, d]` (broadcast over groups).
pub fn encoding_field(grid: (usize, usize), timestamps: &[Timestamp], d: usize, cfg: &EncodingConfig) -> Result<Tensor> {
    let spatial = sincos_2d_with_base(grid.0, grid.1, d, cfg.base_frequency)?;
    let s = grid.0 * grid.1;
    let mut data = Vec::with_capacity(timestamps.len() * s * d);
    for t in timestamps {
        let temporal = temporal_encoding(t, d, cfg)?;
        for row in spatial.data().chunks(d) {
            data.extend(row.iter().zip(&temporal).map(|(a, b)| a + b));
        }
    }
    Tensor::new(vec![timestamps.len(), 1, s, d], data)
}

/// Adds spatial, temporal and (for more than one group) spectral encodings
/// to `tokens [N, d]`.
///
/// Token `i` sits at spatial cell `i mod (h·w)`; `timestamps[i]` and
/// `groups[i]` give its acquisition time and spectral group.
pub fn compose_token_embedding(
    tokens: &Tensor,
    grid: (usize, usize),
    timestamps: &[Timestamp],
    groups: &[usize],
    spectral: Option<&Tensor>,
    cfg: &EncodingConfig,
) -> Result<Tensor> {
    if tokens.ndim() != 2 {
        return Err(Error::shape("compose_token_embedding", tokens.shape(), &[]));
    }
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    let cells = grid.0 * grid.1;
    if d != cfg.embed_dim || cells == 0 || n % cells != 0 || timestamps.len() != n || groups.len() != n {
        return Err(Error::shape(
            "compose_token_embedding",
            tokens.shape(),
            &[timestamps.len(), groups.len(), cells, cfg.embed_dim],
        ));
    }
    let spatial = sincos_2d_with_base(grid.0, grid.1, d, cfg.base_frequency)?;
    let mut out = tokens.clone();
    let mut cached: Option<(Timestamp, Vec<f64>)> = None;
    for i in 0..n {
        let temporal = match &cached {
            Some((t, v)) if *t == timestamps[i] => v.clone(),
            _ => {
                let v = temporal_encoding(&timestamps[i], d, cfg)?;
                cached = Some((timestamps[i], v.clone()));
                v
            }
        };
        let srow = &spatial.data()[(i % cells) * d..(i % cells + 1) * d];
        let spec = match spectral {
            Some(table) if cfg.spectral_groups > 1 => Some(spectral_group_encoding(table, groups[i])?),
            _ => None,
        };
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            let mut field = srow[j] + temporal[j];
            if let Some(sv) = &spec {
                field += sv[j];
            }
            row[j] += field;
        }
    }
    Ok(out)
}
