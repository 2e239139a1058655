use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numerics::precision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl OptimState {
    pub fn new(sizes: impl IntoIterator<Item = usize>, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        OptimState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            cfg,
        }
    }
}

/// One bias-corrected Adam update of `params` in place. Weight decay, when
/// nonzero, is added to the gradient (L2 form).
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape("adam", &[p.len()], &[g.len(), state.m[i].len()]));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps, weight_decay } = state.cfg;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j] + weight_decay * p[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = precision::round(p[j] - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}

/// Adam bound to the parameter order of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub state: OptimState,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Self {
        Adam { state: OptimState::new(params.tensors().iter().map(|t| t.numel()), cfg) }
    }

    /// Applies the accumulated `grad` of every parameter; parameters without
    /// a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| if t.grad().is_some() { Vec::new() } else { vec![0.0; t.numel()] })
            .collect();
        let grads: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .zip(zeros)
            .map(|(t, z)| t.grad().map_or(z, <[f64]>::to_vec))
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut values: Vec<&mut [f64]> = params.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
        adam_step(&mut values, &grad_refs, &mut self.state, lr)
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::invalid(format!("step {step} outside 0..={total_steps}")));
    }
    if step == 0 {
        return Ok(lr_max);
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let c = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c))
}
