#![allow(dead_code)]

use hfm_core::data::*;
use hfm_core::encodings::Timestamp;
use hfm_core::mae::*;
use hfm_core::numerics::{GradCheckConfig, Tape, Tensor, Var};
use hfm_core::seg::{dice_loss, weighted_ce};
use hfm_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Magnitudes in `[lo, hi)` with random sign.
pub fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn binary_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| f64::from(u8::from(rng.random_bool(p))))
}

/// `Σ v ⊙ r` for a fixed random `r`, so every output element gets a distinct upstream gradient.
pub fn probe(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let r = t.constant(uniform(&shape, -1.0, 1.0, &mut rng(seed)));
    let prod = t.mul(v, r)?;
    Ok(t.sum(prod))
}

pub fn stamp(year: i32, doy: u32, minute: u32) -> Timestamp {
    Timestamp::from_calendar(year, doy, minute, 0).unwrap()
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub loss: Loss,
}

fn case(name: &'static str, params: Vec<Tensor>, loss: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { name, params, loss: Box::new(loss) }
}

fn tanh_grad(x: f64) -> f64 {
    1.0 - x.tanh() * x.tanh()
}

/// One small random problem per differentiable operation.
pub fn op_cases() -> Vec<OpCase> {
    let mut r = rng(7);
    let r = &mut r;
    let toy = ModelConfig { image_size: 8, bands: 3, timesteps: 2, ..ModelConfig::toy() };
    let recon_target = uniform(&[2, toy.n_tokens(), toy.row_len()], -1.0, 1.0, r);
    let recon_plans: Vec<MaskPlan> = (0..2).map(|_| random_mask(toy.n_tokens(), 0.75, r)).collect();
    let seg_target = binary_mask(&[2, 4, 4], 0.3, r);
    let gather_ids = vec![vec![3, 0, 2], vec![1, 1, 4]];
    vec![
        case("matmul", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 2], -1.0, 1.0, r)], |t, p| {
            let y = t.matmul(p[0], p[1])?;
            probe(t, y, 1)
        }),
        case("bmm", vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 4, 2], -1.0, 1.0, r)], |t, p| {
            let y = t.bmm(p[0], p[1])?;
            probe(t, y, 2)
        }),
        case("add", vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)], |t, p| {
            let y = t.add(p[0], p[1])?;
            probe(t, y, 3)
        }),
        case("sub", vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)], |t, p| {
            let y = t.sub(p[0], p[1])?;
            probe(t, y, 4)
        }),
        case("mul", vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 3], -1.0, 1.0, r)], |t, p| {
            let y = t.mul(p[0], p[1])?;
            probe(t, y, 5)
        }),
        case("div", vec![uniform(&[2, 3], -1.0, 1.0, r), away_from_zero(&[2, 3], 0.5, 1.5, r)], |t, p| {
            let y = t.div(p[0], p[1])?;
            probe(t, y, 6)
        }),
        case("add_bcast", vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[3, 1], -1.0, 1.0, r)], |t, p| {
            let y = t.add_bcast(p[0], p[1])?;
            probe(t, y, 7)
        }),
        case("broadcast_to", vec![uniform(&[1, 4], -1.0, 1.0, r)], |t, p| {
            let y = t.broadcast_to(p[0], &[3, 4])?;
            probe(t, y, 8)
        }),
        case("scale", vec![uniform(&[5], -1.0, 1.0, r)], |t, p| {
            let y = t.scale(p[0], -2.5);
            probe(t, y, 9)
        }),
        case("add_scalar", vec![uniform(&[5], -1.0, 1.0, r)], |t, p| {
            let y = t.add_scalar(p[0], 0.7);
            let y = t.mul(y, y)?;
            probe(t, y, 10)
        }),
        case("gelu", vec![uniform(&[2, 5], -3.0, 3.0, r)], |t, p| {
            let y = t.gelu(p[0]);
            probe(t, y, 11)
        }),
        case("relu", vec![away_from_zero(&[2, 5], 0.05, 2.0, r)], |t, p| {
            let y = t.relu(p[0]);
            probe(t, y, 12)
        }),
        case("map", vec![uniform(&[6], -2.0, 2.0, r)], |t, p| {
            let y = t.map(p[0], f64::tanh, tanh_grad);
            probe(t, y, 13)
        }),
        case(
            "layer_norm",
            vec![uniform(&[3, 5], -2.0, 2.0, r), uniform(&[5], 0.5, 1.5, r), uniform(&[5], -0.5, 0.5, r)],
            |t, p| {
                let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
                probe(t, y, 14)
            },
        ),
        case("softmax_lastdim", vec![uniform(&[3, 4], -2.0, 2.0, r)], |t, p| {
            let y = t.softmax_lastdim(p[0])?;
            probe(t, y, 15)
        }),
        case("log_softmax_lastdim", vec![uniform(&[3, 4], -2.0, 2.0, r)], |t, p| {
            let y = t.log_softmax_lastdim(p[0])?;
            probe(t, y, 16)
        }),
        case("reshape", vec![uniform(&[2, 6], -1.0, 1.0, r)], |t, p| {
            let y = t.reshape(p[0], &[3, 4])?;
            probe(t, y, 17)
        }),
        case("permute", vec![uniform(&[2, 3, 4], -1.0, 1.0, r)], |t, p| {
            let y = t.permute(p[0], &[2, 0, 1])?;
            probe(t, y, 18)
        }),
        case("narrow", vec![uniform(&[3, 5], -1.0, 1.0, r)], |t, p| {
            let y = t.narrow(p[0], 1, 1, 3)?;
            probe(t, y, 19)
        }),
        case("concat", vec![uniform(&[2, 2, 3], -1.0, 1.0, r), uniform(&[2, 1, 3], -1.0, 1.0, r)], |t, p| {
            let y = t.concat(&[p[0], p[1]], 1)?;
            probe(t, y, 20)
        }),
        case("gather_rows", vec![uniform(&[2, 5, 3], -1.0, 1.0, r)], move |t, p| {
            let y = t.gather_rows(p[0], &gather_ids)?;
            probe(t, y, 21)
        }),
        case("sum", vec![uniform(&[4], -1.0, 1.0, r)], |t, p| {
            let y = t.mul(p[0], p[0])?;
            Ok(t.sum(y))
        }),
        case("mean", vec![uniform(&[4], -1.0, 1.0, r)], |t, p| {
            let y = t.mul(p[0], p[0])?;
            Ok(t.mean(y))
        }),
        case(
            "conv2d",
            vec![uniform(&[2, 3, 5, 5], -1.0, 1.0, r), uniform(&[4, 3, 3, 3], -0.5, 0.5, r), uniform(&[4], -0.5, 0.5, r)],
            |t, p| {
                let y = t.conv2d(p[0], p[1], Some(p[2]), 1)?;
                probe(t, y, 22)
            },
        ),
        case(
            "conv_transpose2d",
            vec![uniform(&[2, 3, 3, 3], -1.0, 1.0, r), uniform(&[3, 2, 2, 2], -0.5, 0.5, r), uniform(&[2], -0.5, 0.5, r)],
            |t, p| {
                let y = t.conv_transpose2d(p[0], p[1], Some(p[2]), 2)?;
                probe(t, y, 23)
            },
        ),
        case("recon_loss", vec![uniform(&[2, toy.n_tokens(), toy.row_len()], -1.0, 1.0, r)], move |t, p| {
            recon_loss(t, p[0], &recon_target, &recon_plans, &toy)
        }),
        case("weighted_ce", vec![uniform(&[2, 2, 4, 4], -2.0, 2.0, r)], {
            let target = seg_target.clone();
            move |t, p| weighted_ce(t, p[0], &target, (1.0, 1000.0))
        }),
        case("dice_loss", vec![uniform(&[2, 2, 4, 4], -2.0, 2.0, r)], move |t, p| dice_loss(t, p[0], &seg_target, 1.0)),
    ]
}

pub fn gradcheck_cfg() -> GradCheckConfig {
    GradCheckConfig { h: 1e-3, tol: 1e-4, ..GradCheckConfig::default() }
}

pub fn random_patch_batch(cfg: &ModelConfig, b: usize, rng: &mut impl Rng) -> PatchBatch {
    let inputs = uniform(&[b, cfg.timesteps, cfg.bands, cfg.image_size, cfg.image_size], -1.0, 1.0, rng);
    let timestamps = (0..b)
        .map(|i| (0..cfg.timesteps).map(|k| stamp(2016, 100 + i as u32, 600 + 15 * k as u32)).collect())
        .collect();
    PatchBatch::new(inputs, timestamps).unwrap()
}

/// Synthetic single-acquisition fire patches split by year into train, validation and test.
pub fn fire_dataset(scenes: usize) -> std::collections::BTreeMap<String, Vec<PatchSample>> {
    let synth = synth_generate(&SynthConfig { scenes, frames: 1, ..SynthConfig::default() }).unwrap();
    let singles = tile_and_filter(&synth).unwrap();
    fire_splits(singles, &SplitRules::finetune()).unwrap()
}

/// Synthetic unlabeled patches from the pretraining years.
pub fn pretrain_samples(scenes: usize, timesteps: usize) -> Vec<PatchSample> {
    let cfg = SynthConfig { scenes, first_year: 2014, last_year: 2018, ..SynthConfig::default() };
    let singles = tile_and_filter(&synth_generate(&cfg).unwrap()).unwrap();
    if timesteps == 1 {
        singles
    } else {
        multi_timestep_samples(&singles, &mut rng(0)).unwrap()
    }
}

/// Flat-loop confusion counts `(tp, fp, fn, tn)` over binary masks.
pub fn count_oracle(pred: &[f64], target: &[f64]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        if pred[i] == 1.0 && target[i] == 1.0 {
            tp += 1;
        } else if pred[i] == 1.0 {
            fp += 1;
        } else if target[i] == 1.0 {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    (tp, fp, fn_, tn)
}

pub fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}
