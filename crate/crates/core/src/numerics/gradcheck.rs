//! Central-difference gradient checker.

use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::precision::{with_precision, Precision};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Floor of the relative-error denominator, so tensors with vanishing
    /// gradients are compared in absolute terms.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            tol: 1e-4,
            max_coords_per_param: 24,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest coordinate error relative to the gradient scale of its own
    /// parameter tensor; decides `passed`.
    pub max_rel_error: f64,
    /// Largest error relative to the coordinate's own magnitude. Diagnostic
    /// only: near-zero entries inflate it with truncation error.
    pub max_coord_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` builds a scalar loss on the supplied tape from one variable per
/// parameter. Runs in 64-bit mode regardless of the caller's precision.
pub fn grad_check<F>(params: &[Tensor], cfg: &GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&cfg.h) {
        return Err(Error::invalid(format!("grad_check step h={} outside [1e-5, 1e-2]", cfg.h)));
    }
    with_precision(Precision::Double, || {
        let mut params: Vec<Tensor> = params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.set_requires_grad(true);
                p
            })
            .collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(&params)
            .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect();
        drop(tape);

        let mut eval = |params: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            tape.value(loss).item()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut report =
            GradCheckReport { max_rel_error: 0.0, max_coord_rel_error: 0.0, worst: None, checked: 0, passed: true };
        for pi in 0..params.len() {
            let n = params[pi].numel();
            let coords: Vec<usize> = if n <= cfg.max_coords_per_param {
                (0..n).collect()
            } else {
                let mut c = index::sample(&mut rng, n, cfg.max_coords_per_param).into_vec();
                c.sort_unstable();
                c
            };
            let mut checked = Vec::with_capacity(coords.len());
            for idx in coords {
                let orig = params[pi].data()[idx];
                params[pi].data_mut()[idx] = orig + cfg.h;
                let fp = eval(&params)?;
                params[pi].data_mut()[idx] = orig - cfg.h;
                let fm = eval(&params)?;
                params[pi].data_mut()[idx] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::NonFinite(format!("loss at param {pi} coord {idx}")));
                }
                checked.push((idx, analytic[pi][idx], (fp - fm) / (2.0 * cfg.h)));
            }
            let scale = checked.iter().fold(cfg.abs_floor, |s, &(_, a, n)| s.max(a.abs()).max(n.abs()));
            for (idx, a, numeric) in checked {
                let err = (a - numeric).abs();
                let own = err / a.abs().max(numeric.abs()).max(cfg.abs_floor);
                report.max_coord_rel_error = report.max_coord_rel_error.max(own);
                let rel = err / scale;
                report.checked += 1;
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some(Coordinate { param: pi, index: idx, analytic: a, numeric, rel_error: rel });
                }
            }
        }
        report.passed = report.max_rel_error <= cfg.tol;
        Ok(report)
    })
}
