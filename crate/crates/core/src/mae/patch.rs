use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `[C, H, W]` → `[(H/ts)·(W/ts), C·ts·ts]`; rows in row-major grid order,
/// each row band-major (`[c][dy][dx]`).
pub fn patchify(x: &Tensor, token_size: usize) -> Result<Tensor> {
    if x.ndim() != 3 || token_size == 0 || !x.shape()[1].is_multiple_of(token_size) || !x.shape()[2].is_multiple_of(token_size) {
        return Err(Error::shape("patchify", x.shape(), &[token_size]));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (gh, gw) = (h / token_size, w / token_size);
    let row = c * token_size * token_size;
    let mut out = vec![0.0; gh * gw * row];
    patchify_into(x.data(), c, h, w, token_size, &mut out);
    Tensor::new(vec![gh * gw, row], out)
}

pub(crate) fn patchify_into(x: &[f64], c: usize, h: usize, w: usize, ts: usize, out: &mut [f64]) {
    let gw = w / ts;
    let row = c * ts * ts;
    for gy in 0..h / ts {
        for gx in 0..gw {
            let base = (gy * gw + gx) * row;
            for ch in 0..c {
                for dy in 0..ts {
                    let src = (ch * h + gy * ts + dy) * w + gx * ts;
                    let dst = base + (ch * ts + dy) * ts;
                    out[dst..dst + ts].copy_from_slice(&x[src..src + ts]);
                }
            }
        }
    }
}

/// Exact inverse of [`patchify`] for a square token grid.
pub fn unpatchify(tokens: &Tensor, token_size: usize) -> Result<Tensor> {
    let area = token_size * token_size;
    if tokens.ndim() != 2 || area == 0 || !tokens.shape()[1].is_multiple_of(area) || tokens.shape()[1] == 0 {
        return Err(Error::shape("unpatchify", tokens.shape(), &[token_size]));
    }
    let n = tokens.shape()[0];
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::shape("unpatchify", tokens.shape(), &[token_size]));
    }
    let c = tokens.shape()[1] / area;
    let hw = g * token_size;
    let row = c * area;
    let mut out = vec![0.0; c * hw * hw];
    let t = tokens.data();
    for gy in 0..g {
        for gx in 0..g {
            let base = (gy * g + gx) * row;
            for ch in 0..c {
                for dy in 0..token_size {
                    let dst = (ch * hw + gy * token_size + dy) * hw + gx * token_size;
                    let src = base + (ch * token_size + dy) * token_size;
                    out[dst..dst + token_size].copy_from_slice(&t[src..src + token_size]);
                }
            }
        }
    }
    Tensor::new(vec![c, hw, hw], out)
}

/// `[B, T, C, H, W]` → `[B, T, cells, C·ts²]`.
pub fn patchify_batch(x: &Tensor, token_size: usize) -> Result<Tensor> {
    if x.ndim() != 5 || token_size == 0 || !x.shape()[3].is_multiple_of(token_size) || !x.shape()[4].is_multiple_of(token_size) {
        return Err(Error::shape("patchify_batch", x.shape(), &[token_size]));
    }
    let s = x.shape();
    let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let cells = (h / token_size) * (w / token_size);
    let row = c * token_size * token_size;
    let img = c * h * w;
    let mut out = vec![0.0; b * t * cells * row];
    for i in 0..b * t {
        patchify_into(&x.data()[i * img..(i + 1) * img], c, h, w, token_size, &mut out[i * cells * row..(i + 1) * cells * row]);
    }
    Tensor::new(vec![b, t, cells, row], out)
}
