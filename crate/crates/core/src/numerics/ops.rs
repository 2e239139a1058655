//! Tensor-in, tensor-out forms of the differentiable ops, for callers that
//! do not need gradients.

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn unary(x: &Tensor, f: impl FnOnce(&mut Tape, super::Var) -> Result<super::Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let vg = tape.constant(gamma.clone());
    let vb = tape.constant(beta.clone());
    let out = tape.layer_norm(vx, vg, vb, eps)?;
    Ok(tape.value(out).clone())
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    unary(x, |t, v| t.softmax_lastdim(v))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(super::kernels::gelu)
}

/// Unbatched transposed convolution: `x [c_in,h,w]`, `kernel [c_in,c_out,k,k]`.
pub fn transposed_conv2d(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape("transposed_conv2d", x.shape(), kernel.shape()));
    }
    let s = x.shape();
    let xb = x.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut tape = Tape::new();
    let (vx, vk) = (tape.constant(xb), tape.constant(kernel.clone()));
    let out = tape.conv_transpose2d(vx, vk, None, stride)?;
    let y = tape.value(out).clone();
    let ys = y.shape()[1..].to_vec();
    y.reshape(&ys)
}
