//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its output value and whatever the
//! backward rule needs. Nodes are created in topological order, so
//! [`Tape::backward`] is a single reverse sweep that visits each node once.

use super::kernels::{self, ConvGeom};
use super::precision::round_slice;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvTGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, p: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    BroadcastTo(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Map(Var, fn(f64) -> f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { a: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { a: Var, ids: Vec<Vec<usize>> },
    Sum(Var),
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, batch: usize, c_out: usize },
    ConvT { x: Var, w: Var, bias: Option<Var>, g: ConvTGeom },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Registers an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.zero_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: rg, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        round_slice(&mut data);
        #[cfg(debug_assertions)]
        {
            if inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
                debug_assert!(
                    data.iter().all(|x| x.is_finite()),
                    "non-finite output from {op:?}"
                );
            }
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad: rg,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `[p,m,k] · [p,k,n] → [p,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (p, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(p * m * n);
        for i in 0..p {
            out.extend(kernels::matmul(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        Ok(self.push(vec![p, m, n], out, Op::Bmm { a, b, p, m, k, n }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip(a, b, |x, y| x / y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Div(a, b), &[a, b]))
    }

    /// `a + b` with `b` broadcast into the shape of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !kernels::broadcastable(&sa, &sb) {
            return Err(Error::shape("add_bcast", &sa, &sb));
        }
        let idx = kernels::broadcast_indices(&sa, &sb);
        let bd = self.data(b);
        let out = self.data(a).iter().zip(&idx).map(|(&x, &i)| x + bd[i]).collect();
        Ok(self.push(sa, out, Op::AddBcast(a, b), &[a, b]))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if !kernels::broadcastable(shape, &sa) {
            return Err(Error::shape("broadcast_to", &sa, shape));
        }
        let idx = kernels::broadcast_indices(shape, &sa);
        let ad = self.data(a);
        let out = idx.iter().map(|&i| ad[i]).collect();
        Ok(self.push(shape.to_vec(), out, Op::BroadcastTo(a), &[a]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    /// Pointwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Map(a, df), &[a])
    }

    // ---- normalisation --------------------------------------------------

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::shape("layer_norm", &sx, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let rows = self.data(x).len() / d.max(1);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for (r, xr) in self.data(x).chunks(d).enumerate() {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (xr[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(sx, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = match sa.last() {
            Some(&d) if d >= 1 => d,
            _ => return Err(Error::shape("softmax", &sa, &[])),
        };
        let out = kernels::softmax_rows(self.data(a), d);
        Ok(self.push(sa, out, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = match sa.last() {
            Some(&d) if d >= 1 => d,
            _ => return Err(Error::shape("log_softmax", &sa, &[])),
        };
        let out = kernels::log_softmax_rows(self.data(a), d);
        Ok(self.push(sa, out, Op::LogSoftmax(a), &[a]))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &sa, perm));
        }
        let (out, shape) = kernels::permute(self.data(a), &sa, perm);
        Ok(self.push(shape, out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::shape("narrow", &sa, &[axis, start, len]));
        }
        let (outer, inner) = outer_inner(&sa, axis);
        let ad = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&ad[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { a, axis, start }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", &s0, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i]) {
                return Err(Error::shape("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Per-batch row gather: `[B,N,D]` with `ids[b]` of length K → `[B,K,D]`.
    pub fn gather_rows(&mut self, a: Var, ids: &[Vec<usize>]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || ids.len() != sa[0] {
            return Err(Error::shape("gather_rows", &sa, &[ids.len()]));
        }
        let k = ids.first().map_or(0, |r| r.len());
        if ids.iter().any(|r| r.len() != k || r.iter().any(|&i| i >= sa[1])) {
            return Err(Error::invalid("gather_rows: ragged or out-of-range ids"));
        }
        let (n, d) = (sa[1], sa[2]);
        let ad = self.data(a);
        let mut out = Vec::with_capacity(sa[0] * k * d);
        for (b, row) in ids.iter().enumerate() {
            for &i in row {
                out.extend_from_slice(&ad[(b * n + i) * d..(b * n + i + 1) * d]);
            }
        }
        Ok(self.push(vec![sa[0], k, d], out, Op::Gather { a, ids: ids.to_vec() }, &[a]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.data(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- convolutions ---------------------------------------------------

    /// Stride-1 convolution, NCHW. `w`: `[c_out, c_in, k, k]`, `bias`: `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeom { c_in, h, w: wd, k, pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let ck = c_in * k * k;
        let xd = self.data(x);
        let wdat = self.data(w);
        let mut out = Vec::with_capacity(batch * c_out * oh * ow);
        for b in 0..batch {
            let cols = kernels::im2col(&xd[b * c_in * h * wd..(b + 1) * c_in * h * wd], geom);
            let mut y = kernels::matmul(wdat, &cols, c_out, ck, oh * ow);
            if let Some(bv) = bias {
                let bd = self.data(bv);
                for (o, row) in y.chunks_mut(oh * ow).enumerate() {
                    row.iter_mut().for_each(|v| *v += bd[o]);
                }
            }
            out.extend(y);
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            vec![batch, c_out, oh, ow],
            out,
            Op::Conv2d { x, w, bias, geom, batch, c_out },
            &inputs,
        ))
    }

    /// Transposed convolution, NCHW, no padding and no output padding.
    /// `w`: `[c_in, c_out, k, k]`; output extent `(h-1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d stride must be >= 1"));
        }
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[2] != sw[3] || sw[2] == 0 || sx[2] == 0 || sx[3] == 0 {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let g = ConvTGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[1],
            h: sx[2],
            w: sx[3],
            k: sw[2],
            stride,
        };
        if let Some(b) = bias {
            if self.shape(b) != [g.c_out] {
                return Err(Error::shape("conv_transpose2d bias", self.shape(b), &[g.c_out]));
            }
        }
        let (oh, ow) = ((g.h - 1) * stride + g.k, (g.w - 1) * stride + g.k);
        let hw = g.h * g.w;
        let ckk = g.c_out * g.k * g.k;
        let xd = self.data(x);
        let wdat = self.data(w);
        let mut out = Vec::with_capacity(g.batch * g.c_out * oh * ow);
        for b in 0..g.batch {
            // cols[(o,ky,kx), hw] = Σ_i w[i,(o,ky,kx)] x[i,hw]
            let cols = kernels::matmul_tn(wdat, &xd[b * g.c_in * hw..(b + 1) * g.c_in * hw], g.c_in, ckk, hw);
            let mut y = kernels::scatter_transposed(&cols, g.c_out, g.h, g.w, g.k, stride);
            if let Some(bv) = bias {
                let bd = self.data(bv);
                for (o, row) in y.chunks_mut(oh * ow).enumerate() {
                    row.iter_mut().for_each(|v| *v += bd[o]);
                }
            }
            out.extend(y);
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(vec![g.batch, g.c_out, oh, ow], out, Op::ConvT { x, w, bias, g }, &inputs))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates `∂loss/∂leaf` into every reachable leaf with
    /// `requires_grad`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss).to_vec();
        if numel(&ls) != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, d: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul { a, b, m, k, n } => {
                if nodes[a.0].requires_grad {
                    acc(a, kernels::matmul_nt(g, val(b), m, n, k));
                }
                if nodes[b.0].requires_grad {
                    acc(b, kernels::matmul_tn(val(a), g, m, k, n));
                }
            }
            &Op::Bmm { a, b, p, m, k, n } => {
                let (ad, bd) = (val(a), val(b));
                if nodes[a.0].requires_grad {
                    let mut da = Vec::with_capacity(p * m * k);
                    for q in 0..p {
                        da.extend(kernels::matmul_nt(&g[q * m * n..(q + 1) * m * n], &bd[q * k * n..(q + 1) * k * n], m, n, k));
                    }
                    acc(a, da);
                }
                if nodes[b.0].requires_grad {
                    let mut db = Vec::with_capacity(p * k * n);
                    for q in 0..p {
                        db.extend(kernels::matmul_tn(&ad[q * m * k..(q + 1) * m * k], &g[q * m * n..(q + 1) * m * n], m, k, n));
                    }
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                acc(a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                acc(b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
            }
            &Op::Div(a, b) => {
                let (ad, bd) = (val(a), val(b));
                acc(a, g.iter().zip(bd).map(|(x, y)| x / y).collect());
                acc(b, g.iter().zip(ad.iter().zip(bd)).map(|(x, (n, d))| -x * n / (d * d)).collect());
            }
            &Op::AddBcast(a, b) => {
                acc(a, g.to_vec());
                if nodes[b.0].requires_grad {
                    let idx = kernels::broadcast_indices(nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let mut db = vec![0.0; nodes[b.0].value.numel()];
                    for (gv, &j) in g.iter().zip(&idx) {
                        db[j] += gv;
                    }
                    acc(b, db);
                }
            }
            &Op::BroadcastTo(a) => {
                let idx = kernels::broadcast_indices(nodes[i].value.shape(), nodes[a.0].value.shape());
                let mut da = vec![0.0; nodes[a.0].value.numel()];
                for (gv, &j) in g.iter().zip(&idx) {
                    da[j] += gv;
                }
                acc(a, da);
            }
            &Op::Scale(a, c) => acc(a, g.iter().map(|x| x * c).collect()),
            &Op::AddScalar(a) => acc(a, g.to_vec()),
            &Op::Gelu(a) => acc(a, g.iter().zip(val(a)).map(|(x, &v)| x * kernels::gelu_grad(v)).collect()),
            &Op::Relu(a) => acc(a, g.iter().zip(val(a)).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect()),
            &Op::Map(a, df) => acc(a, g.iter().zip(val(a)).map(|(x, &v)| x * df(v)).collect()),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.numel();
                let gd = val(*gamma);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for (r, (grow, xh)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        dgamma[j] += grow[j] * xh[j];
                        dbeta[j] += grow[j];
                        let dxh = grow[j] * gd[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = grow[j] * gd[j];
                        dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            &Op::Softmax(a) => {
                let d = *nodes[i].value.shape().last().unwrap();
                let mut da = vec![0.0; g.len()];
                for ((grow, yrow), drow) in g.chunks(d).zip(out.chunks(d)).zip(da.chunks_mut(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for j in 0..d {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(a, da);
            }
            &Op::LogSoftmax(a) => {
                let d = *nodes[i].value.shape().last().unwrap();
                let mut da = vec![0.0; g.len()];
                for ((grow, yrow), drow) in g.chunks(d).zip(out.chunks(d)).zip(da.chunks_mut(d)) {
                    let s: f64 = grow.iter().sum();
                    for j in 0..d {
                        drow[j] = grow[j] - yrow[j].exp() * s;
                    }
                }
                acc(a, da);
            }
            &Op::Reshape(a) => acc(a, g.to_vec()),
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_perm(perm);
                let (da, _) = kernels::permute(g, nodes[i].value.shape(), &inv);
                acc(*a, da);
            }
            &Op::Narrow { a, axis, start } => {
                let sa = nodes[a.0].value.shape();
                let len = nodes[i].value.shape()[axis];
                let (outer, inner) = outer_inner(sa, axis);
                let mut da = vec![0.0; nodes[a.0].value.numel()];
                for o in 0..outer {
                    let base = (o * sa[axis] + start) * inner;
                    da[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(a, da);
            }
            Op::Concat { inputs, axis } => {
                let so = nodes[i].value.shape();
                let (outer, inner) = outer_inner(so, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if nodes[v.0].requires_grad {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * so[*axis] + offset) * inner;
                            dv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(v, dv);
                    }
                    offset += len;
                }
            }
            Op::Gather { a, ids } => {
                let sa = nodes[a.0].value.shape();
                let (n, d) = (sa[1], sa[2]);
                let k = ids.first().map_or(0, |r| r.len());
                let mut da = vec![0.0; nodes[a.0].value.numel()];
                for (b, row) in ids.iter().enumerate() {
                    for (r, &src) in row.iter().enumerate() {
                        let gi = &g[(b * k + r) * d..(b * k + r + 1) * d];
                        let dst = &mut da[(b * n + src) * d..(b * n + src + 1) * d];
                        dst.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
                    }
                }
                acc(*a, da);
            }
            &Op::Sum(a) => acc(a, vec![g[0]; nodes[a.0].value.numel()]),
            &Op::Conv2d { x, w, bias, geom, batch, c_out } => {
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let ck = geom.c_in * geom.k * geom.k;
                let img = geom.c_in * geom.h * geom.w;
                let (xd, wd) = (val(x), val(w));
                let need_x = nodes[x.0].requires_grad;
                let need_w = nodes[w.0].requires_grad;
                let mut dx = if need_x { vec![0.0; batch * img] } else { Vec::new() };
                let mut dw = vec![0.0; if need_w { c_out * ck } else { 0 }];
                let mut db = vec![0.0; c_out];
                for b in 0..batch {
                    let gb = &g[b * c_out * oh * ow..(b + 1) * c_out * oh * ow];
                    if need_w {
                        let cols = kernels::im2col(&xd[b * img..(b + 1) * img], geom);
                        let part = kernels::matmul_nt(gb, &cols, c_out, oh * ow, ck);
                        dw.iter_mut().zip(&part).for_each(|(a, p)| *a += p);
                    }
                    if need_x {
                        let dcols = kernels::matmul_tn(wd, gb, c_out, ck, oh * ow);
                        let dimg = kernels::col2im(&dcols, geom);
                        dx[b * img..(b + 1) * img].copy_from_slice(&dimg);
                    }
                    for (o, row) in gb.chunks(oh * ow).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                if need_x {
                    acc(x, dx);
                }
                if need_w {
                    acc(w, dw);
                }
                if let Some(bv) = bias {
                    acc(bv, db);
                }
            }
            &Op::ConvT { x, w, bias, g: geo } => {
                let (oh, ow) = ((geo.h - 1) * geo.stride + geo.k, (geo.w - 1) * geo.stride + geo.k);
                let hw = geo.h * geo.w;
                let ckk = geo.c_out * geo.k * geo.k;
                let (xd, wd) = (val(x), val(w));
                let need_x = nodes[x.0].requires_grad;
                let need_w = nodes[w.0].requires_grad;
                let mut dx = Vec::with_capacity(if need_x { geo.batch * geo.c_in * hw } else { 0 });
                let mut dw = vec![0.0; if need_w { geo.c_in * ckk } else { 0 }];
                let mut db = vec![0.0; geo.c_out];
                for b in 0..geo.batch {
                    let gb = &g[b * geo.c_out * oh * ow..(b + 1) * geo.c_out * oh * ow];
                    let dcols = kernels::gather_transposed(gb, geo.c_out, geo.h, geo.w, geo.k, geo.stride);
                    if need_x {
                        dx.extend(kernels::matmul(wd, &dcols, geo.c_in, ckk, hw));
                    }
                    if need_w {
                        let xb = &xd[b * geo.c_in * hw..(b + 1) * geo.c_in * hw];
                        let part = kernels::matmul_nt(xb, &dcols, geo.c_in, hw, ckk);
                        dw.iter_mut().zip(&part).for_each(|(a, p)| *a += p);
                    }
                    for (o, row) in gb.chunks(oh * ow).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                if need_x {
                    acc(x, dx);
                }
                if need_w {
                    acc(w, dw);
                }
                if let Some(bv) = bias {
                    acc(bv, db);
                }
            }
        }
    }
}
