use super::config::ModelConfig;
use super::mask::MaskPlan;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Standardizes each `(row, band group)` segment by its own mean and
/// population variance.
pub fn normalize_targets(target: &Tensor, cfg: &ModelConfig) -> Tensor {
    let area = cfg.token_area();
    let groups = cfg.band_groups();
    let mut out = target.clone();
    let row_len = cfg.row_len();
    for row in out.data_mut().chunks_mut(row_len) {
        for r in &groups {
            let seg = &mut row[r.start * area..r.end * area];
            let n = seg.len() as f64;
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            seg.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
    out
}

/// Per-element weights selecting masked tokens: each masked token's values
/// sum to `1 / (n_masked · B)`.
fn mask_weights(shape: &[usize], plans: &[MaskPlan], cfg: &ModelConfig) -> Result<Tensor> {
    let (b, rows, row_len) = (shape[0], shape[1], shape[2]);
    let (g, s) = (cfg.spectral_groups, cfg.cells());
    let area = cfg.token_area();
    let groups = cfg.band_groups();
    let mut w = vec![0.0; b * rows * row_len];
    for (bi, plan) in plans.iter().enumerate() {
        if plan.n_masked() == 0 {
            return Err(Error::Contract("reconstruction loss needs at least one masked token".into()));
        }
        let per_token = 1.0 / (plan.n_masked() * b) as f64;
        for &id in plan.masked_ids() {
            let (t, rest) = (id / (g * s), id % (g * s));
            let (gi, cell) = (rest / s, rest % s);
            let r = &groups[gi];
            let width = (r.len() * area) as f64;
            let base = (bi * rows + t * s + cell) * row_len;
            w[base + r.start * area..base + r.end * area].iter_mut().for_each(|x| *x = per_token / width);
        }
    }
    Tensor::new(shape.to_vec(), w)
}

/// Mean squared error over masked tokens, averaged over the batch.
///
/// `pred` and `target` are `[B, T·cells, C·ts²]` in natural token order.
pub fn recon_loss(tape: &mut Tape, pred: Var, target: &Tensor, plans: &[MaskPlan], cfg: &ModelConfig) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let expect = [plans.len(), cfg.timesteps * cfg.cells(), cfg.row_len()];
    if shape != expect || target.shape() != expect {
        return Err(Error::shape("recon_loss", &shape, target.shape()));
    }
    for p in plans {
        if p.n_tokens != cfg.n_tokens() {
            return Err(Error::Contract(format!("mask plan over {} tokens, expected {}", p.n_tokens, cfg.n_tokens())));
        }
    }
    let weights = tape.constant(mask_weights(&shape, plans, cfg)?);
    let target = if cfg.norm_pix { normalize_targets(target, cfg) } else { target.clone() };
    let target = tape.constant(target);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weights)?;
    Ok(tape.sum(weighted))
}

/// [`recon_loss`] on plain tensors.
pub fn recon_loss_value(pred: &Tensor, target: &Tensor, plans: &[MaskPlan], cfg: &ModelConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = recon_loss(&mut tape, p, target, plans, cfg)?;
    tape.value(l).item()
}
