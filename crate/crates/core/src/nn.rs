//! Parameter storage and the layers shared by the encoder, the
//! reconstruction decoder and the segmentation head.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass first binds
//! the store onto a tape ([`ParamStore::bind`]) and then threads the
//! resulting [`Bound`] through every layer.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::tensor::numel;
use crate::numerics::{precision, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    tensors: Vec<Tensor>,
    meta_only: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated at ±2 std.
    TruncNormal(f64),
    Normal(f64),
}

impl Init {
    fn sample(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => {
                let n = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| precision::round(n.sample(rng)))
            }
            Init::TruncNormal(std) => {
                let n = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = n.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break precision::round(v);
                    }
                })
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// A store that records names and shapes without allocating buffers.
    pub fn shapes_only() -> Self {
        ParamStore { meta_only: true, ..Self::default() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        if !self.meta_only {
            self.tensors.push(init.sample(shape, rng).with_requires_grad());
        }
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.shapes.iter().map(|s| numel(s)).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.shapes)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, s)| numel(s))
            .sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        assert!(!self.meta_only, "shape-only store has no buffers");
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        assert!(!self.meta_only, "shape-only store has no buffers");
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors().iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Adds the tape gradients of bound parameters into their `grad` buffers.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces every tensor by the same-named tensor in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        self.load_matching(other, "")?;
        Ok(())
    }

    /// Copies parameters whose names start with `prefix` from `other`;
    /// returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.names.len() {
            if !self.names[i].starts_with(prefix) {
                continue;
            }
            let j = other
                .position(&self.names[i])
                .ok_or_else(|| Error::Malformed { what: "checkpoint", detail: format!("missing parameter {}", self.names[i]) })?;
            let src = &other.tensors[j];
            if src.shape() != self.shapes[i].as_slice() {
                return Err(Error::shape("load_params", src.shape(), &self.shapes[i]));
            }
            self.tensors[i] = src.clone().with_requires_grad();
            self.tensors[i].zero_grad();
            copied += 1;
        }
        Ok(copied)
    }

    /// Builds a store directly from named tensors (checkpoint loading).
    pub fn from_named(entries: Vec<(String, Tensor)>) -> Self {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.names.push(n);
            s.shapes.push(t.shape().to_vec());
            s.tensors.push(t.with_requires_grad());
        }
        s
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Affine map over the last axis; `w: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.weight"), &[d_in, d_out], init, rng);
        let b = store.add(format!("{name}.bias"), &[d_out], Init::Zeros, rng);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.d_in) {
            return Err(Error::shape("linear", &shape, &[self.d_in, self.d_out]));
        }
        let rows = numel(&shape) / self.d_in;
        let x2 = tape.reshape(x, &[rows, self.d_in])?;
        let y = tape.matmul(x2, p[self.w])?;
        let y = tape.add_bcast(y, p[self.b])?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        tape.reshape(y, &out_shape)
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.weight"), &[d], Init::Ones, rng),
            beta: store.add(format!("{name}.bias"), &[d], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Multi-head self-attention with a fused qkv projection.
#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Attention {
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, Init::TruncNormal(0.02), rng),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, Init::TruncNormal(0.02), rng),
            heads,
        }
    }

    /// `x: [B, N, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = d / h;
        let qkv = self.qkv.forward(tape, p, x)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B, H, N, dh]
        let q = tape.narrow(qkv, 0, 0, 1)?;
        let q = tape.reshape(q, &[b * h, n, dh])?;
        let k = tape.narrow(qkv, 0, 1, 1)?;
        let k = tape.reshape(k, &[b * h, n, dh])?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let v = tape.narrow(qkv, 0, 2, 1)?;
        let v = tape.reshape(v, &[b * h, n, dh])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_lastdim(scores)?;
        let ctx = tape.bmm(attn, v)?; // [B·H, N, dh]
        let ctx = tape.reshape(ctx, &[b, h, n, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        self.proj.forward(tape, p, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, Init::TruncNormal(0.02), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, Init::TruncNormal(0.02), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, rng),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * mlp_ratio, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.mlp.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Stride-1 square convolution with same padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            w: store.add(format!("{name}.weight"), &[c_out, c_in, k, k], Init::Normal(std), rng),
            b: store.add(format!("{name}.bias"), &[c_out], Init::Zeros, rng),
            k,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.w], Some(p[self.b]), self.k / 2)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / c_in as f64).sqrt();
        ConvTranspose2d {
            w: store.add(format!("{name}.weight"), &[c_in, c_out, k, k], Init::Normal(std), rng),
            b: store.add(format!("{name}.bias"), &[c_out], Init::Zeros, rng),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p[self.w], Some(p[self.b]), self.stride)
    }
}
