//! `HFMP1` patch container, little-endian throughout:
//!
//! ```text
//! "HFMP1" | u8 version = 1 | u8 flags (bit0: label) | u8 T | u8 C
//! | u16 H | u16 W | i64 timestamps[T] | f32 data[T·C·H·W]
//! | u8 label[H·W] (if flagged) | u64 FNV-1a of all preceding bytes
//! ```

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::scene::{Location, PatchSample};
use crate::encodings::Timestamp;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"HFMP1";
pub const VERSION: u8 = 1;
const FLAG_LABEL: u8 = 1;
const HEADER_LEN: usize = 5 + 1 + 1 + 1 + 1 + 2 + 2;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode_sample(sample: &PatchSample) -> Result<Vec<u8>> {
    let s = sample.data.shape();
    if s.len() != 4 || s[0] != sample.timestamps.len() {
        return Err(Error::shape("encode_sample", s, &[sample.timestamps.len()]));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let narrow8 = |v: usize, what| u8::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds 255")));
    let narrow16 = |v: usize, what| u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds 65535")));
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t + 4 * sample.data.numel() + h * w + 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(if sample.label.is_some() { FLAG_LABEL } else { 0 });
    out.push(narrow8(t, "timesteps")?);
    out.push(narrow8(c, "channels")?);
    out.extend_from_slice(&narrow16(h, "height")?.to_le_bytes());
    out.extend_from_slice(&narrow16(w, "width")?.to_le_bytes());
    for ts in &sample.timestamps {
        out.extend_from_slice(&ts.epoch_seconds().to_le_bytes());
    }
    for &v in sample.data.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(label) = &sample.label {
        if label.shape() != [h, w] {
            return Err(Error::shape("encode_sample_label", label.shape(), &[h, w]));
        }
        for &v in label.data() {
            out.push(match v {
                0.0 => 0,
                1.0 => 1,
                _ => return Err(Error::NonBinary(v)),
            });
        }
    }
    let digest = fnv1a(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            needed: self.pos.saturating_add(n),
            available: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

/// Parses a container; the location is left empty.
pub fn decode_sample(bytes: &[u8]) -> Result<PatchSample> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len().min(bytes.len()))?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: "HFMP1".into(), found: magic.to_vec() });
    }
    let [version] = r.array::<1>()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let [flags, t, c] = r.array::<3>()?;
    let h = u16::from_le_bytes(r.array()?) as usize;
    let w = u16::from_le_bytes(r.array()?) as usize;
    let (t, c) = (t as usize, c as usize);
    let has_label = flags & FLAG_LABEL != 0;
    let expected = HEADER_LEN + 8 * t + 4 * t * c * h * w + if has_label { h * w } else { 0 } + 8;
    if bytes.len() < expected {
        return Err(Error::Truncated { needed: expected, available: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed { what: "container", detail: format!("{} trailing bytes", bytes.len() - expected) });
    }
    let body = &bytes[..expected - 8];
    let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::DigestMismatch { expected: stored, computed });
    }
    let timestamps = (0..t)
        .map(|_| Timestamp::from_epoch(i64::from_le_bytes(r.array()?)))
        .collect::<Result<Vec<_>>>()?;
    let raw = r.take(4 * t * c * h * w)?;
    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    let label = if has_label {
        let raw = r.take(h * w)?;
        let vals = raw
            .iter()
            .map(|&b| match b {
                0 | 1 => Ok(f64::from(b)),
                _ => Err(Error::NonBinary(f64::from(b))),
            })
            .collect::<Result<Vec<_>>>()?;
        Some(Tensor::new(vec![h, w], vals)?)
    } else {
        None
    };
    Ok(PatchSample { data: Tensor::new(vec![t, c, h, w], data)?, timestamps, label, location: Location::default() })
}

/// Digest stored in the trailer of an encoded container.
pub fn trailer_digest(bytes: &[u8]) -> Result<u64> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { needed: 8, available: bytes.len() });
    }
    Ok(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes")))
}

/// File name encoding a sample's location and latest timestamp.
pub fn sample_file_name(sample: &PatchSample, suffix: &str) -> String {
    let l = &sample.location;
    format!("{}__{}_{}__{}.{suffix}", l.scene_id, l.tile_row, l.tile_col, sample.last_timestamp().epoch_seconds())
}

/// Inverse of [`sample_file_name`]; `None` for names in another form.
pub fn location_from_file_name(path: &Path) -> Option<Location> {
    let name = path.file_name()?.to_str()?;
    let mut parts = name.split("__");
    let scene_id = parts.next()?.to_string();
    let (r, c) = parts.next()?.split_once('_')?;
    parts.next()?;
    Some(Location { scene_id, tile_row: r.parse().ok()?, tile_col: c.parse().ok()? })
}

/// Writes the container; returns its digest.
pub fn write_container(path: &Path, sample: &PatchSample) -> Result<u64> {
    let bytes = encode_sample(sample)?;
    fs::write(path, &bytes)?;
    trailer_digest(&bytes)
}

/// Reads a container; the location is recovered from the file name when it
/// follows [`sample_file_name`].
pub fn read_container(path: &Path) -> Result<PatchSample> {
    let bytes = fs::read(path)?;
    let mut s = decode_sample(&bytes)?;
    if let Some(loc) = location_from_file_name(path) {
        s.location = loc;
    }
    Ok(s)
}

/// Reads a container whose digest must equal the manifest's record.
pub fn read_verified(path: &Path, expected: u64) -> Result<PatchSample> {
    let bytes = fs::read(path)?;
    let computed = fnv1a(&bytes[..bytes.len().saturating_sub(8)]);
    if computed != expected {
        return Err(Error::DigestMismatch { expected, computed });
    }
    let mut s = decode_sample(&bytes)?;
    if let Some(loc) = location_from_file_name(path) {
        s.location = loc;
    }
    Ok(s)
}
