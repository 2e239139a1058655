mod common;

use common::{random_patch_batch, rng};
use hfm_core::mae::*;
use hfm_core::numerics::Tensor;
use proptest::prelude::*;

/// Scalar count of a pre-norm ViT encoder built from the configuration alone.
fn encoder_count_oracle(cfg: &ModelConfig) -> usize {
    let d = cfg.embed_dim;
    let g = cfg.spectral_groups;
    let area = cfg.token_size * cfg.token_size;
    let (q, r) = (cfg.bands / g, cfg.bands % g);
    let embed: usize = (0..g).map(|i| (q + usize::from(i < r)) * area * d + d).sum();
    let spectral = if g > 1 { g * d } else { 0 };
    let hidden = cfg.mlp_ratio * d;
    let block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    embed + spectral + d + cfg.depth * block + 2 * d
}

proptest! {
    #[test]
    fn patchify_places_every_pixel(c in 1usize..4, g in 1usize..4, ts in 1usize..5, seed in any::<u64>()) {
        let n = g * ts;
        let x = common::uniform(&[c, n, n], -1.0, 1.0, &mut rng(seed));
        let p = patchify(&x, ts).unwrap();
        prop_assert_eq!(p.shape(), &[g * g, c * ts * ts]);
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for dy in 0..ts {
                        for dx in 0..ts {
                            let got = p.data()[(gy * g + gx) * c * ts * ts + (ch * ts + dy) * ts + dx];
                            let want = x.data()[(ch * n + gy * ts + dy) * n + gx * ts + dx];
                            prop_assert_eq!(got, want);
                        }
                    }
                }
            }
        }
        prop_assert_eq!(unpatchify(&p, ts).unwrap(), x);
    }

    #[test]
    fn consistent_masks_repeat_over_time(t in 1usize..4, per_step in 1usize..40, k in 1usize..1000, seed in any::<u64>()) {
        let ratio = k as f64 / 1000.0;
        let plan = consistent_mask(t, per_step, ratio, &mut rng(seed));
        plan.validate().unwrap();
        prop_assert_eq!(plan.n_visible, t * ((1000 - k) * per_step).div_ceil(1000));
        let masked = plan.is_masked();
        for step in 1..t {
            prop_assert_eq!(&masked[..per_step], &masked[step * per_step..(step + 1) * per_step]);
        }
    }

    #[test]
    fn parameter_count_matches_oracle(
        heads in 1usize..4, width in 1usize..4, depth in 0usize..3, groups in 1usize..4, mlp in 1usize..5
    ) {
        let cfg = ModelConfig {
            embed_dim: 12 * heads * width,
            heads,
            depth,
            spectral_groups: groups,
            mlp_ratio: mlp,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 1,
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        prop_assert_eq!(encoder_parameter_count(&cfg), encoder_count_oracle(&cfg));
        let model = MaskedAutoencoder::new(cfg.clone(), &mut rng(0)).unwrap();
        let encoder_scalars: usize = model.params.iter().filter(|(n, _)| n.starts_with("encoder.")).map(|(_, t)| t.numel()).sum();
        prop_assert_eq!(encoder_scalars, encoder_count_oracle(&cfg));
    }
}

/// Mean over masked tokens of the per-token mean squared error, averaged over the batch.
fn recon_oracle(pred: &Tensor, target: &Tensor, plans: &[MaskPlan], norm: bool) -> f64 {
    let (rows, len) = (pred.shape()[1], pred.shape()[2]);
    let mut total = 0.0;
    for (b, plan) in plans.iter().enumerate() {
        let mut per_sample = 0.0;
        for &id in plan.masked_ids() {
            let at = (b * rows + id) * len;
            let mut tgt = target.data()[at..at + len].to_vec();
            if norm {
                let mean = tgt.iter().sum::<f64>() / len as f64;
                let var = tgt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
                tgt.iter_mut().for_each(|v| *v = (*v - mean) / (var + 1e-6).sqrt());
            }
            let mse = pred.data()[at..at + len].iter().zip(&tgt).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / len as f64;
            per_sample += mse;
        }
        total += per_sample / plan.n_masked() as f64;
    }
    total / plans.len() as f64
}

#[test]
fn reconstruction_loss_matches_oracle() {
    for norm_pix in [false, true] {
        let cfg = ModelConfig { timesteps: 2, norm_pix, ..ModelConfig::toy() };
        let mut r = rng(3);
        let shape = [3, cfg.n_tokens(), cfg.row_len()];
        let pred = common::uniform(&shape, -1.0, 1.0, &mut r);
        let target = common::uniform(&shape, -2.0, 3.0, &mut r);
        let plans: Vec<MaskPlan> = (0..3).map(|_| random_mask(cfg.n_tokens(), 0.75, &mut r)).collect();
        let got = hfm_core::numerics::with_precision(hfm_core::numerics::Precision::Double, || {
            recon_loss_value(&pred, &target, &plans, &cfg).unwrap()
        });
        let want = recon_oracle(&pred, &target, &plans, norm_pix);
        assert!((got - want).abs() < 1e-10 * want.max(1.0), "norm_pix={norm_pix}: {got} vs {want}");
    }
}

#[test]
fn visible_predictions_do_not_affect_the_loss() {
    let cfg = ModelConfig::toy();
    let mut r = rng(4);
    let shape = [2, cfg.n_tokens(), cfg.row_len()];
    let mut pred = common::uniform(&shape, -1.0, 1.0, &mut r);
    let target = common::uniform(&shape, -1.0, 1.0, &mut r);
    let plans: Vec<MaskPlan> = (0..2).map(|_| random_mask(cfg.n_tokens(), 0.75, &mut r)).collect();
    let before = recon_loss_value(&pred, &target, &plans, &cfg).unwrap();
    for (b, plan) in plans.iter().enumerate() {
        for &id in &plan.keep_ids {
            let at = (b * cfg.n_tokens() + id) * cfg.row_len();
            pred.data_mut()[at..at + cfg.row_len()].iter_mut().for_each(|v| *v += 5.0);
        }
    }
    assert_eq!(recon_loss_value(&pred, &target, &plans, &cfg).unwrap(), before);
}

#[test]
fn fully_visible_plan_is_a_contract_error() {
    let cfg = ModelConfig::toy();
    let shape = [1, cfg.n_tokens(), cfg.row_len()];
    let z = Tensor::zeros(&shape);
    let err = recon_loss_value(&z, &z, &[MaskPlan::all_visible(cfg.n_tokens())], &cfg).unwrap_err();
    assert!(matches!(err, hfm_core::Error::Contract(_)));
}

#[test]
fn encoder_output_shapes_follow_the_mask() {
    for (t, groups, mode) in [(1, 1, MaskMode::Independent), (3, 1, MaskMode::ConsistentAcrossTime), (2, 3, MaskMode::Independent)] {
        let cfg = ModelConfig { timesteps: t, spectral_groups: groups, mask_mode: mode, ..ModelConfig::toy() };
        let model = MaskedAutoencoder::new(cfg.clone(), &mut rng(0)).unwrap();
        let batch = random_patch_batch(&cfg, 2, &mut rng(1));
        let full = model.encode(&batch, None).unwrap();
        assert_eq!(full.shape(), &[2, 1 + cfg.n_tokens(), cfg.embed_dim]);
        let pb = PretrainBatch::sample(batch.clone(), &cfg, &mut rng(2));
        let v = pb.plans[0].n_visible;
        let masked = model.encode(&batch, Some(&pb.plans)).unwrap();
        assert_eq!(masked.shape(), &[2, 1 + v, cfg.embed_dim]);
        let recon = model.decode(&masked, &pb.plans, &batch.timestamps).unwrap();
        assert_eq!(recon.shape(), &[2, cfg.n_tokens() / groups, cfg.row_len()]);
    }
}

#[test]
fn same_seed_same_model_and_loss() {
    let cfg = ModelConfig { timesteps: 3, ..ModelConfig::toy() };
    let a = MaskedAutoencoder::new(cfg.clone(), &mut rng(9)).unwrap();
    let b = MaskedAutoencoder::new(cfg.clone(), &mut rng(9)).unwrap();
    let batch = PretrainBatch::sample(random_patch_batch(&cfg, 2, &mut rng(1)), &cfg, &mut rng(2));
    assert_eq!(a.loss(&batch).unwrap().to_bits(), b.loss(&batch).unwrap().to_bits());
    let c = MaskedAutoencoder::new(cfg, &mut rng(10)).unwrap();
    assert_ne!(a.loss(&batch).unwrap(), c.loss(&batch).unwrap());
}

#[test]
fn timestamps_change_the_encoding() {
    let cfg = ModelConfig::toy();
    let model = MaskedAutoencoder::new(cfg.clone(), &mut rng(0)).unwrap();
    let batch = random_patch_batch(&cfg, 1, &mut rng(1));
    let mut later = batch.clone();
    later.timestamps[0][0] = common::stamp(2016, 100, 615);
    assert_ne!(model.encode(&batch, None).unwrap(), model.encode(&later, None).unwrap());
}

#[test]
fn bad_configurations_are_rejected() {
    let base = ModelConfig::toy();
    for cfg in [
        ModelConfig { mask_ratio: 1.0, ..base.clone() },
        ModelConfig { heads: 3, ..base.clone() },
        ModelConfig { token_size: 3, ..base.clone() },
        ModelConfig { spectral_groups: 4, ..base.clone() },
        ModelConfig { timesteps: 0, ..base.clone() },
    ] {
        assert!(MaskedAutoencoder::new(cfg, &mut rng(0)).is_err());
    }
}
