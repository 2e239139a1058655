//! Whole-model gradient checks on the toy configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encodings::Timestamp;
use crate::error::{Error, Result};
use crate::mae::{MaskedAutoencoder, ModelConfig, PatchBatch, PretrainBatch};
use crate::nn::{Bound, ParamStore};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Tensor};
use crate::seg::{LossKind, SegBatch, SegConfig, SegmentationModel};

/// Standard deviation of the noise added to every parameter before checking.
pub const DEFAULT_JITTER: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Adds N(0, std²) noise to every parameter, moving zero biases, unit gains
/// and small-norm tokens off their degenerate initial values.
pub fn jitter(params: &mut ParamStore, std: f64, rng: &mut impl Rng) -> Result<()> {
    if std == 0.0 {
        return Ok(());
    }
    let noise = Normal::new(0.0, std).map_err(|e| Error::invalid(format!("jitter std {std}: {e}")))?;
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += noise.sample(rng);
        }
    }
    Ok(())
}

fn random_batch(cfg: &ModelConfig, b: usize, rng: &mut impl Rng) -> Result<PatchBatch> {
    let shape = [b, cfg.timesteps, cfg.bands, cfg.image_size, cfg.image_size];
    let inputs = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let timestamps = (0..b)
        .map(|i| {
            (0..cfg.timesteps)
                .map(|k| Timestamp::from_calendar(2016, 100 + i as u32, 600 + 15 * k as u32, 0))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    PatchBatch::new(inputs, timestamps)
}

/// Masked-reconstruction loss gradients over every parameter.
pub fn pretrain_check(cfg: &ModelConfig, check: &GradCheckConfig, jitter_std: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MaskedAutoencoder::new(cfg.clone(), &mut rng)?;
    jitter(&mut model.params, jitter_std, &mut rng)?;
    let batch = PretrainBatch::sample(random_batch(cfg, 2, &mut rng)?, cfg, &mut rng);
    grad_check(model.params.tensors(), check, |t, vars| model.loss_on(t, &Bound::from_vars(vars.to_vec()), &batch))
}

/// Segmentation loss gradients over every parameter.
pub fn finetune_check(
    cfg: &ModelConfig,
    seg: &SegConfig,
    check: &GradCheckConfig,
    jitter_std: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SegmentationModel::new(cfg.clone(), seg.clone(), &mut rng)?;
    jitter(&mut model.params, jitter_std, &mut rng)?;
    let batch = random_batch(cfg, 2, &mut rng)?;
    let n = cfg.image_size;
    let targets = Tensor::from_fn(&[2, n, n], |_| f64::from(u8::from(rng.random_bool(0.2))));
    let batch = SegBatch::new(batch, targets)?;
    grad_check(model.params.tensors(), check, |t, vars| model.loss_on(t, &Bound::from_vars(vars.to_vec()), &batch))
}

/// The pretraining loss at one and three timesteps and both fine-tuning
/// losses, on the toy model.
pub fn toy_model_checks(check: &GradCheckConfig, jitter_std: f64) -> Result<Vec<ModelCheck>> {
    let mut out = Vec::new();
    for t in [1, 3] {
        let cfg = ModelConfig { timesteps: t, ..ModelConfig::toy() };
        let report = pretrain_check(&cfg, check, jitter_std, 10 + t as u64)?;
        out.push(ModelCheck { name: format!("pretrain T={t}"), report });
    }
    for (name, kind, seed) in [("weighted_ce", LossKind::WeightedCe, 21), ("dice", LossKind::Dice, 22)] {
        let seg = SegConfig { decoder_channels: vec![8, 4], class_weights: (1.0, 1000.0), ..SegConfig::with_loss(kind) };
        let report = finetune_check(&ModelConfig::toy(), &seg, check, jitter_std, seed)?;
        out.push(ModelCheck { name: name.into(), report });
    }
    Ok(out)
}
