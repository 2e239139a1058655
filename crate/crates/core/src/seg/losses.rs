use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

fn check_target(logits_shape: &[usize], target: &Tensor) -> Result<()> {
    let s = logits_shape;
    if s.len() != 4 || s[1] != 2 || target.shape() != [s[0], s[2], s[3]] {
        return Err(Error::shape("segmentation_target", s, target.shape()));
    }
    if let Some(&v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::NonBinary(v));
    }
    Ok(())
}

/// `[B, 2, H, W]` → `[B, H, W, 2]`.
fn class_last(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.permute(logits, &[0, 2, 3, 1])
}

/// `Σ w_t·(−log p_t) / Σ w_t` over all pixels.
pub fn weighted_ce(tape: &mut Tape, logits: Var, target: &Tensor, weights: (f64, f64)) -> Result<Var> {
    check_target(tape.shape(logits), target)?;
    if !(weights.0 > 0.0 && weights.1 > 0.0) {
        return Err(Error::invalid(format!("class weights {weights:?} must be positive")));
    }
    let total: f64 = target.data().iter().map(|&t| if t == 1.0 { weights.1 } else { weights.0 }).sum();
    let mut coef = vec![0.0; target.numel() * 2];
    for (i, &t) in target.data().iter().enumerate() {
        let c = t as usize;
        coef[2 * i + c] = -[weights.0, weights.1][c] / total;
    }
    let mut cshape = target.shape().to_vec();
    cshape.push(2);
    let coef = tape.constant(Tensor::new(cshape, coef)?);
    let x = class_last(tape, logits)?;
    let logp = tape.log_softmax_lastdim(x)?;
    let picked = tape.mul(logp, coef)?;
    Ok(tape.sum(picked))
}

/// Foreground soft Dice over the whole batch:
/// `1 − (2·Σp·t + eps) / (Σp + Σt + eps)`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_target(tape.shape(logits), target)?;
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("dice eps {eps} must be positive")));
    }
    let x = class_last(tape, logits)?;
    let probs = tape.softmax_lastdim(x)?;
    let p = tape.narrow(probs, 3, 1, 1)?;
    let p = tape.reshape(p, target.shape())?;
    let t = tape.constant(target.clone());
    let pt = tape.mul(p, t)?;
    let inter = tape.sum(pt);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, eps);
    let sp = tape.sum(p);
    let den = tape.add_scalar(sp, target.sum() + eps);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Per-pixel argmax over `[B, 2, H, W]`; exact ties go to class 0.
pub fn predict_mask(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape("predict_mask", s, &[]));
    }
    let (b, hw) = (s[0], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let base = bi * 2 * hw;
        for i in 0..hw {
            out.push(if d[base + hw + i] > d[base + i] { 1.0 } else { 0.0 });
        }
    }
    Tensor::new(vec![b, s[2], s[3]], out)
}

pub fn weighted_ce_value(logits: &Tensor, target: &Tensor, weights: (f64, f64)) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = weighted_ce(&mut tape, l, target, weights)?;
    tape.value(v).item()
}

pub fn dice_loss_value(logits: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = dice_loss(&mut tape, l, target, eps)?;
    tape.value(v).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{with_precision, Precision};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nll(neg: f64, pos: f64, cls: usize) -> f64 {
        let m = neg.max(pos);
        let lse = m + ((neg - m).exp() + (pos - m).exp()).ln();
        lse - [neg, pos][cls]
    }

    fn random_case(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> (Tensor, Tensor) {
        let logits = Tensor::from_fn(&[b, 2, h, w], |_| rng.random_range(-3.0..3.0));
        let target = Tensor::from_fn(&[b, h, w], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        (logits, target)
    }

    #[test]
    fn two_pixel_weighted_example() {
        let logits = Tensor::new(vec![1, 2, 1, 2], vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let target = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let got = with_precision(Precision::Double, || weighted_ce_value(&logits, &target, (1.0, 1000.0)).unwrap());
        let want = (nll(0.3, 0.1, 0) + 1000.0 * nll(-0.2, 0.4, 1)) / 1001.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn unit_weights_give_plain_mean_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, target) = random_case(&mut rng, 2, 4, 4);
        with_precision(Precision::Double, || {
            let plain = weighted_ce_value(&logits, &target, (1.0, 1.0)).unwrap();
            let mut sum = 0.0;
            for b in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        let t = target.get(&[b, y, x]) as usize;
                        sum += nll(logits.get(&[b, 0, y, x]), logits.get(&[b, 1, y, x]), t);
                    }
                }
            }
            assert!((plain - sum / 32.0).abs() < 1e-7);
            let a = weighted_ce_value(&logits, &target, (1.0, 50.0)).unwrap();
            let c = weighted_ce_value(&logits, &target, (3.0, 150.0)).unwrap();
            assert!((a - c).abs() < 1e-7);
        });
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let target = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let logits = Tensor::new(vec![1, 2, 1, 2], vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        assert!(weighted_ce_value(&logits, &target, (1.0, 1.0)).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_non_binary_targets() {
        let target = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        let logits = Tensor::zeros(&[1, 2, 1, 2]);
        assert!(matches!(weighted_ce_value(&logits, &target, (1.0, 1.0)), Err(Error::NonBinary(_))));
    }

    #[test]
    fn dice_examples() {
        let n = 16;
        let target = Tensor::from_fn(&[1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        // Hard probabilities equal to the target.
        let logits = Tensor::from_fn(&[1, 2, 4, 4], |i| {
            let (c, p) = (i / n, i % n);
            let t = target.data()[p];
            if (c == 1) == (t == 1.0) { 60.0 } else { -60.0 }
        });
        assert!(dice_loss_value(&logits, &target, 1.0).unwrap().abs() < 1e-12);

        let empty = Tensor::zeros(&[1, 4, 4]);
        let all_pos = Tensor::from_fn(&[1, 2, 4, 4], |i| if i < n { -60.0 } else { 60.0 });
        let l = dice_loss_value(&all_pos, &empty, 1.0).unwrap();
        assert!((l - (1.0 - 1.0 / 17.0)).abs() < 1e-6, "{l}");
        let all_neg = Tensor::from_fn(&[1, 2, 4, 4], |i| if i < n { 60.0 } else { -60.0 });
        assert!(dice_loss_value(&all_neg, &empty, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dice_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (logits, target) = random_case(&mut rng, 2, 3, 3);
            let l = dice_loss_value(&logits, &target, 1.0).unwrap();
            assert!((0.0..1.0).contains(&l), "{l}");
        }
    }

    #[test]
    fn argmax_with_ties_to_background() {
        let logits = Tensor::new(vec![1, 2, 1, 3], vec![1.0, 0.5, 0.0, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(predict_mask(&logits).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn positive_shift_never_removes_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (logits, _) = random_case(&mut rng, 1, 4, 4);
            let before = predict_mask(&logits).unwrap();
            let c = rng.random_range(0.0..2.0);
            let shifted = Tensor::from_fn(&[1, 2, 4, 4], |i| logits.data()[i] + if i >= 16 { c } else { 0.0 });
            let after = predict_mask(&shifted).unwrap();
            for (a, b) in before.data().iter().zip(after.data()) {
                assert!(!(*a == 1.0 && *b == 0.0));
            }
        }
    }
}
