//! `HFMCKPT1` parameter files, little-endian:
//!
//! ```text
//! "HFMCKPT1" | u32 meta_len | meta (JSON) | u32 n_entries
//! | n × (u16 name_len | name | u8 ndim | u32 dims[ndim] | u64 offset)
//! | f32 buffers | u64 FNV-1a of all preceding bytes
//! ```
//!
//! Offsets count bytes from the start of the buffer section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::container::{fnv1a, Reader};
use crate::error::{Error, Result};
use crate::mae::{MaskedAutoencoder, ModelConfig};
use crate::nn::ParamStore;
use crate::numerics::tensor::numel;
use crate::numerics::Tensor;
use crate::seg::{SegConfig, SegmentationModel};

pub const MAGIC: &[u8; 8] = b"HFMCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pretrain,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<SegConfig>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_mae(m: &MaskedAutoencoder) -> Self {
        Checkpoint {
            meta: CheckpointMeta { kind: ModelKind::Pretrain, model: m.cfg.clone(), seg: None, extra: serde_json::Value::Null },
            params: m.params.clone(),
        }
    }

    pub fn from_seg(m: &SegmentationModel) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                kind: ModelKind::Segmentation,
                model: m.model_cfg.clone(),
                seg: Some(m.seg_cfg.clone()),
                extra: serde_json::Value::Null,
            },
            params: m.params.clone(),
        }
    }

    pub fn to_mae(&self) -> Result<MaskedAutoencoder> {
        if self.meta.kind != ModelKind::Pretrain {
            return Err(Error::invalid("checkpoint does not hold a pretraining model"));
        }
        MaskedAutoencoder::from_params(self.meta.model.clone(), &self.params)
    }

    pub fn to_seg(&self) -> Result<SegmentationModel> {
        let seg = match (&self.meta.kind, &self.meta.seg) {
            (ModelKind::Segmentation, Some(s)) => s.clone(),
            _ => return Err(Error::invalid("checkpoint does not hold a segmentation model")),
        };
        SegmentationModel::from_params(self.meta.model.clone(), seg, &self.params)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| Error::invalid("metadata too large"))?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            let nb = name.as_bytes();
            out.extend_from_slice(&u16::try_from(nb.len()).map_err(|_| Error::invalid("parameter name too long"))?.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(u8::try_from(t.ndim()).map_err(|_| Error::invalid("too many dimensions"))?);
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::invalid("dimension too large"))?.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = fnv1a(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic {
                expected: "HFMCKPT1".into(),
                found: bytes[..bytes.len().min(MAGIC.len())].to_vec(),
            });
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Truncated { needed: MAGIC.len() + 8, available: bytes.len() });
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        let computed = fnv1a(body);
        if stored != computed {
            return Err(Error::DigestMismatch { expected: stored, computed });
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let meta_len = u32::from_le_bytes(r.array()?) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = u32::from_le_bytes(r.array()?) as usize;
        let mut headers = Vec::with_capacity(n.min(body.len()));
        for _ in 0..n {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|e| Error::Malformed { what: "checkpoint", detail: e.to_string() })?;
            let [ndim] = r.array::<1>()?;
            let shape = (0..ndim)
                .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = u64::from_le_bytes(r.array()?) as usize;
            headers.push((name, shape, offset));
        }
        let buffers = &body[r.pos..];
        let mut entries = Vec::with_capacity(n);
        let mut expected_offset = 0;
        for (name, shape, offset) in headers {
            let len = 4 * numel(&shape);
            if offset != expected_offset || offset + len > buffers.len() {
                return Err(Error::Malformed { what: "checkpoint", detail: format!("bad offset for {name}") });
            }
            expected_offset += len;
            let vals = buffers[offset..offset + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            entries.push((name, Tensor::new(shape, vals)?));
        }
        if expected_offset != buffers.len() {
            return Err(Error::Malformed { what: "checkpoint", detail: "trailing buffer bytes".into() });
        }
        Ok(Checkpoint { meta, params: ParamStore::from_named(entries) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
