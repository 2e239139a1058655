use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{MaskMode, ModelConfig};
use super::loss::recon_loss;
use super::mask::{consistent_mask, random_mask, MaskPlan};
use super::patch::patchify_batch;
use crate::encodings::{encoding_field, Timestamp};
use crate::error::{Error, Result};
use crate::harness::optim::Adam;
use crate::nn::{Block, Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::numerics::{Tape, Tensor, Var};

/// Image stacks with their acquisition times.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// `[B, T, C, H, W]`.
    pub inputs: Tensor,
    /// `timestamps[b][t]`.
    pub timestamps: Vec<Vec<Timestamp>>,
}

impl PatchBatch {
    pub fn new(inputs: Tensor, timestamps: Vec<Vec<Timestamp>>) -> Result<Self> {
        if inputs.ndim() != 5 || timestamps.len() != inputs.shape()[0] || timestamps.iter().any(|t| t.len() != inputs.shape()[1]) {
            return Err(Error::shape("patch_batch", inputs.shape(), &[timestamps.len()]));
        }
        for ts in &timestamps {
            for w in ts.windows(2) {
                if !(w[0] < w[1] && w[0].same_hour(&w[1])) {
                    return Err(Error::Contract(format!(
                        "timestamps {} and {} are not increasing within one hour",
                        w[0].epoch_seconds(),
                        w[1].epoch_seconds()
                    )));
                }
            }
        }
        Ok(PatchBatch { inputs, timestamps })
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn timesteps(&self) -> usize {
        self.inputs.shape()[1]
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let s = self.inputs.shape();
        if s[1] != cfg.timesteps || s[2] != cfg.bands || s[3] != cfg.image_size || s[4] != cfg.image_size {
            return Err(Error::shape(
                "model_input",
                s,
                &[s[0], cfg.timesteps, cfg.bands, cfg.image_size, cfg.image_size],
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainBatch {
    pub batch: PatchBatch,
    pub plans: Vec<MaskPlan>,
}

impl PretrainBatch {
    /// Draws one mask plan per sample according to `cfg.mask_mode`.
    pub fn sample(batch: PatchBatch, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let plans = (0..batch.batch_size())
            .map(|_| match cfg.mask_mode {
                MaskMode::Independent => random_mask(cfg.n_tokens(), cfg.mask_ratio, rng),
                MaskMode::ConsistentAcrossTime => {
                    consistent_mask(cfg.timesteps, cfg.tokens_per_step(), cfg.mask_ratio, rng)
                }
            })
            .collect();
        PretrainBatch { batch, plans }
    }
}

fn check_plans(plans: &[MaskPlan], batch: usize, n_tokens: usize) -> Result<usize> {
    if plans.len() != batch {
        return Err(Error::Contract(format!("{} mask plans for a batch of {batch}", plans.len())));
    }
    let v = plans.first().map_or(0, |p| p.n_visible);
    for p in plans {
        if p.n_tokens != n_tokens || p.n_visible != v || p.shuffle.len() != n_tokens {
            return Err(Error::Contract(format!(
                "mask plan over {} tokens ({} visible) does not fit {n_tokens} tokens ({v} visible)",
                p.n_tokens, p.n_visible
            )));
        }
    }
    Ok(v)
}

/// Spatial + temporal field laid out like the tokens, `[B, N, d]`.
fn field_constant(cfg: &ModelConfig, timestamps: &[Vec<Timestamp>], d: usize) -> Result<Tensor> {
    let enc = cfg.encoding(d);
    let (g, s) = (cfg.spectral_groups, cfg.cells());
    let mut data = Vec::with_capacity(timestamps.len() * cfg.n_tokens() * d);
    for ts in timestamps {
        let f = encoding_field((cfg.grid(), cfg.grid()), ts, d, &enc)?;
        for step in f.data().chunks(s * d) {
            for _ in 0..g {
                data.extend_from_slice(step);
            }
        }
    }
    Tensor::new(vec![timestamps.len(), cfg.n_tokens(), d], data)
}

/// Adds the learned `[G, d]` group table to `x: [B, N, d]` when G > 1.
fn add_spectral(tape: &mut Tape, cfg: &ModelConfig, x: Var, table: Option<Var>) -> Result<Var> {
    let Some(table) = table else { return Ok(x) };
    let s = tape.shape(x).to_vec();
    let (b, d) = (s[0], s[2]);
    let g = cfg.spectral_groups;
    let x = tape.reshape(x, &[b, cfg.timesteps, g, cfg.cells(), d])?;
    let t = tape.reshape(table, &[g, 1, d])?;
    let x = tape.add_bcast(x, t)?;
    tape.reshape(x, &s)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    patch_embed: Vec<Linear>,
    spectral: Option<ParamId>,
    cls_token: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    dim: usize,
}

impl Encoder {
    /// Registers `encoder.*` parameters in `store`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        let area = cfg.token_area();
        let patch_embed = cfg
            .band_groups()
            .iter()
            .enumerate()
            .map(|(g, r)| Linear::new(store, &format!("encoder.patch_embed.{g}"), r.len() * area, d, Init::TruncNormal(0.02), rng))
            .collect();
        let spectral = (cfg.spectral_groups > 1)
            .then(|| store.add("encoder.spectral", &[cfg.spectral_groups, d], Init::Normal(0.02), rng));
        let cls_token = store.add("encoder.cls_token", &[1, 1, d], Init::TruncNormal(0.02), rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(store, "encoder.norm", d, rng);
        Encoder { patch_embed, spectral, cls_token, blocks, norm, dim: d }
    }

    /// `[B, 1 + V, d]`; `keep = None` feeds every token.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cfg: &ModelConfig,
        batch: &PatchBatch,
        keep: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        batch.check(cfg)?;
        let b = batch.batch_size();
        let (t, s, d) = (cfg.timesteps, cfg.cells(), self.dim);
        let area = cfg.token_area();
        let rows = patchify_batch(&batch.inputs, cfg.token_size)?;
        let row_len = cfg.row_len();
        let n_rows = b * t * s;
        let mut per_group = Vec::with_capacity(self.patch_embed.len());
        for (lin, r) in self.patch_embed.iter().zip(cfg.band_groups()) {
            let (c0, c1) = (r.start * area, r.end * area);
            let mut cols = Vec::with_capacity(n_rows * (c1 - c0));
            for row in rows.data().chunks(row_len) {
                cols.extend_from_slice(&row[c0..c1]);
            }
            let x = tape.constant(Tensor::new(vec![n_rows, c1 - c0], cols)?);
            let e = lin.forward(tape, p, x)?;
            per_group.push(tape.reshape(e, &[b, t, 1, s, d])?);
        }
        let tokens = if per_group.len() == 1 { per_group[0] } else { tape.concat(&per_group, 2)? };
        let tokens = tape.reshape(tokens, &[b, cfg.n_tokens(), d])?;
        let field = tape.constant(field_constant(cfg, &batch.timestamps, d)?);
        let x = tape.add(tokens, field)?;
        let x = add_spectral(tape, cfg, x, self.spectral.map(|id| p[id]))?;
        let x = match keep {
            Some(ids) => tape.gather_rows(x, ids)?,
            None => x,
        };
        let cls = tape.broadcast_to(p[self.cls_token], &[b, 1, d])?;
        let mut x = tape.concat(&[cls, x], 1)?;
        for blk in &self.blocks {
            x = blk.forward(tape, p, x)?;
        }
        self.norm.forward(tape, p, x)
    }
}

#[derive(Debug, Clone)]
pub struct MaeDecoder {
    embed: Linear,
    mask_token: ParamId,
    spectral: Option<ParamId>,
    blocks: Vec<Block>,
    norm: LayerNorm,
    heads: Vec<Linear>,
    dim: usize,
}

impl MaeDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let dd = cfg.decoder_dim;
        let embed = Linear::new(store, "decoder.embed", cfg.embed_dim, dd, Init::TruncNormal(0.02), rng);
        let mask_token = store.add("decoder.mask_token", &[1, 1, dd], Init::TruncNormal(0.02), rng);
        let spectral = (cfg.spectral_groups > 1)
            .then(|| store.add("decoder.spectral", &[cfg.spectral_groups, dd], Init::Normal(0.02), rng));
        let blocks = (0..cfg.decoder_depth)
            .map(|i| Block::new(store, &format!("decoder.blocks.{i}"), dd, cfg.decoder_heads, cfg.mlp_ratio, rng))
            .collect();
        let norm = LayerNorm::new(store, "decoder.norm", dd, rng);
        let heads = cfg
            .band_groups()
            .iter()
            .enumerate()
            .map(|(g, r)| Linear::new(store, &format!("decoder.head.{g}"), dd, r.len() * cfg.token_area(), Init::TruncNormal(0.02), rng))
            .collect();
        MaeDecoder { embed, mask_token, spectral, blocks, norm, heads, dim: dd }
    }

    /// `[B, T·cells, C·ts²]` reconstruction in natural token order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cfg: &ModelConfig,
        latent: Var,
        plans: &[MaskPlan],
        timestamps: &[Vec<Timestamp>],
    ) -> Result<Var> {
        let ls = tape.shape(latent).to_vec();
        let n = cfg.n_tokens();
        let b = plans.len();
        let v = check_plans(plans, b, n)?;
        if ls.len() != 3 || ls[0] != b || ls[1] != 1 + v || ls[2] != cfg.embed_dim {
            return Err(Error::shape("decode", &ls, &[b, 1 + v, cfg.embed_dim]));
        }
        let dd = self.dim;
        let x = self.embed.forward(tape, p, latent)?;
        let cls = tape.narrow(x, 1, 0, 1)?;
        let vis = tape.narrow(x, 1, 1, v)?;
        let x = if v < n {
            let masks = tape.broadcast_to(p[self.mask_token], &[b, n - v, dd])?;
            tape.concat(&[vis, masks], 1)?
        } else {
            vis
        };
        let restore: Vec<Vec<usize>> = plans.iter().map(|pl| pl.restore.clone()).collect();
        let x = tape.gather_rows(x, &restore)?;
        let field = tape.constant(field_constant(cfg, timestamps, dd)?);
        let x = tape.add(x, field)?;
        let x = add_spectral(tape, cfg, x, self.spectral.map(|id| p[id]))?;
        let mut x = tape.concat(&[cls, x], 1)?;
        for blk in &self.blocks {
            x = blk.forward(tape, p, x)?;
        }
        let x = self.norm.forward(tape, p, x)?;
        let x = tape.narrow(x, 1, 1, n)?;
        let (t, s) = (cfg.timesteps, cfg.cells());
        if self.heads.len() == 1 {
            return self.heads[0].forward(tape, p, x);
        }
        let g = self.heads.len();
        let x = tape.reshape(x, &[b, t, g, s, dd])?;
        let mut parts = Vec::with_capacity(g);
        for (gi, head) in self.heads.iter().enumerate() {
            let xg = tape.narrow(x, 2, gi, 1)?;
            let xg = tape.reshape(xg, &[b, t, s, dd])?;
            parts.push(head.forward(tape, p, xg)?);
        }
        let y = tape.concat(&parts, 3)?;
        tape.reshape(y, &[b, t * s, cfg.row_len()])
    }
}

/// Encoder, reconstruction decoder and their parameters.
#[derive(Debug, Clone)]
pub struct MaskedAutoencoder {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: MaeDecoder,
}

impl MaskedAutoencoder {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &cfg, rng);
        let decoder = MaeDecoder::new(&mut params, &cfg, rng);
        Ok(MaskedAutoencoder { cfg, params, encoder, decoder })
    }

    /// Rebuilds the model around previously saved parameters.
    pub fn from_params(cfg: ModelConfig, saved: &ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(cfg, &mut rng)?;
        m.params.load_from(saved)?;
        Ok(m)
    }

    /// Masked forward pass and reconstruction loss on `tape`.
    pub fn loss_on(&self, tape: &mut Tape, p: &Bound, batch: &PretrainBatch) -> Result<Var> {
        let pred = self.reconstruct_on(tape, p, batch)?;
        let target = patchify_batch(&batch.batch.inputs, self.cfg.token_size)?;
        let s = target.shape().to_vec();
        let target = target.reshape(&[s[0], s[1] * s[2], s[3]])?;
        recon_loss(tape, pred, &target, &batch.plans, &self.cfg)
    }

    pub fn reconstruct_on(&self, tape: &mut Tape, p: &Bound, batch: &PretrainBatch) -> Result<Var> {
        check_plans(&batch.plans, batch.batch.batch_size(), self.cfg.n_tokens())?;
        let keep: Vec<Vec<usize>> = batch.plans.iter().map(|pl| pl.keep_ids.clone()).collect();
        let latent = self.encoder.forward(tape, p, &self.cfg, &batch.batch, Some(&keep))?;
        self.decoder.forward(tape, p, &self.cfg, latent, &batch.plans, &batch.batch.timestamps)
    }

    pub fn loss(&self, batch: &PretrainBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let l = self.loss_on(&mut tape, &p, batch)?;
        tape.value(l).item()
    }

    /// Encoder output `[B, 1 + V, d]`; `plans = None` keeps every token.
    pub fn encode(&self, batch: &PatchBatch, plans: Option<&[MaskPlan]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let keep = match plans {
            Some(pl) => {
                check_plans(pl, batch.batch_size(), self.cfg.n_tokens())?;
                Some(pl.iter().map(|x| x.keep_ids.clone()).collect::<Vec<_>>())
            }
            None => None,
        };
        let out = self.encoder.forward(&mut tape, &p, &self.cfg, batch, keep.as_deref())?;
        Ok(tape.value(out).clone())
    }

    /// Decodes a latent produced by [`Self::encode`].
    pub fn decode(&self, latent: &Tensor, plans: &[MaskPlan], timestamps: &[Vec<Timestamp>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let l = tape.constant(latent.clone());
        let out = self.decoder.forward(&mut tape, &p, &self.cfg, l, plans, timestamps)?;
        Ok(tape.value(out).clone())
    }
}

/// Forward, backward and one optimizer update; returns the pre-update loss.
pub fn pretrain_step(model: &mut MaskedAutoencoder, batch: &PretrainBatch, opt: &mut Adam, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let loss = model.loss_on(&mut tape, &p, batch)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("pretraining loss {value}")));
    }
    tape.backward(loss)?;
    model.params.zero_grad();
    model.params.collect_grads(&tape, &p);
    opt.step(&mut model.params, lr)?;
    Ok(value)
}

/// Encoder scalar count, computed from shapes alone.
pub fn encoder_parameter_count(cfg: &ModelConfig) -> usize {
    let mut store = ParamStore::shapes_only();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Encoder::new(&mut store, cfg, &mut rng);
    store.num_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(cfg: &ModelConfig, b: usize, seed: u64) -> PatchBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_size;
        let x = Tensor::from_fn(&[b, cfg.timesteps, cfg.bands, n, n], |_| rng.random_range(-1.0..1.0));
        let ts = (0..b)
            .map(|i| {
                (0..cfg.timesteps)
                    .map(|t| Timestamp::from_calendar(2016, 150 + i as u32, 600 + 15 * t as u32, 0).unwrap())
                    .collect()
            })
            .collect();
        PatchBatch::new(x, ts).unwrap()
    }

    #[test]
    fn encoder_parameter_count_near_ninety_million() {
        let n = encoder_parameter_count(&ModelConfig::default());
        assert!((85_000_000..=95_000_000).contains(&n), "{n}");
    }

    #[test]
    fn encoder_output_token_counts() {
        for t in [1, 3] {
            let cfg = ModelConfig { timesteps: t, ..ModelConfig::toy() };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let m = MaskedAutoencoder::new(cfg.clone(), &mut rng).unwrap();
            let pb = PretrainBatch::sample(toy_batch(&cfg, 2, 1), &cfg, &mut rng);
            let z = m.encode(&pb.batch, Some(&pb.plans)).unwrap();
            let v = cfg.n_tokens().div_ceil(4);
            assert_eq!(z.shape(), &[2, 1 + v, cfg.embed_dim]);
            let y = m.decode(&z, &pb.plans, &pb.batch.timestamps).unwrap();
            assert_eq!(y.shape(), &[2, cfg.n_tokens(), cfg.row_len()]);
        }
    }

    #[test]
    fn default_decoder_output_shape() {
        let cfg = ModelConfig { depth: 1, decoder_depth: 1, embed_dim: 48, heads: 4, decoder_dim: 32, decoder_heads: 4, timesteps: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MaskedAutoencoder::new(cfg.clone(), &mut rng).unwrap();
        let pb = PretrainBatch::sample(toy_batch(&cfg, 1, 1), &cfg, &mut rng);
        let z = m.encode(&pb.batch, Some(&pb.plans)).unwrap();
        let y = m.decode(&z, &pb.plans, &pb.batch.timestamps).unwrap();
        assert_eq!(y.shape(), &[1, 192, 176]);
    }

    #[test]
    fn masked_pixels_do_not_reach_encoder() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MaskedAutoencoder::new(cfg.clone(), &mut rng).unwrap();
        let batch = toy_batch(&cfg, 1, 4);
        let pb = PretrainBatch::sample(batch.clone(), &cfg, &mut rng);
        let before = m.encode(&batch, Some(&pb.plans)).unwrap();
        let mut perturbed = batch.clone();
        let masked = pb.plans[0].is_masked();
        let (g, ts) = (cfg.grid(), cfg.token_size);
        for c in 0..cfg.bands {
            for y in 0..cfg.image_size {
                for x in 0..cfg.image_size {
                    if masked[(y / ts) * g + x / ts] {
                        let v = perturbed.inputs.get(&[0, 0, c, y, x]);
                        perturbed.inputs.set(&[0, 0, c, y, x], v + 3.0);
                    }
                }
            }
        }
        assert_ne!(perturbed.inputs, batch.inputs);
        assert_eq!(m.encode(&perturbed, Some(&pb.plans)).unwrap(), before);
    }

    #[test]
    fn equivalent_plans_give_equal_reconstructions() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MaskedAutoencoder::new(cfg.clone(), &mut rng).unwrap();
        let batch = toy_batch(&cfg, 1, 6);
        let plan = random_mask(cfg.n_tokens(), cfg.mask_ratio, &mut rng);
        // Same visible set in a different order, masked tail reversed.
        let v = plan.n_visible;
        let mut shuffle = plan.shuffle.clone();
        shuffle[..v].reverse();
        shuffle[v..].reverse();
        let other = MaskPlan::from_shuffle(shuffle, v).unwrap();
        let run = |pl: &MaskPlan| {
            let z = m.encode(&batch, Some(std::slice::from_ref(pl))).unwrap();
            m.decode(&z, std::slice::from_ref(pl), &batch.timestamps).unwrap()
        };
        let (a, b) = (run(&plan), run(&other));
        assert!(a.max_abs_diff(&b) < 1e-5, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn all_visible_skips_mask_tokens() {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = MaskedAutoencoder::new(cfg.clone(), &mut rng).unwrap();
        let batch = toy_batch(&cfg, 1, 6);
        let plan = [MaskPlan::all_visible(cfg.n_tokens())];
        let z = m.encode(&batch, Some(&plan)).unwrap();
        let a = m.decode(&z, &plan, &batch.timestamps).unwrap();
        let id = m.params.position("decoder.mask_token").unwrap();
        m.params.tensors_mut()[id].data_mut().iter_mut().for_each(|v| *v = 9.0);
        assert_eq!(m.decode(&z, &plan, &batch.timestamps).unwrap(), a);
    }

    #[test]
    fn spectral_groups_run_end_to_end() {
        let cfg = ModelConfig { spectral_groups: 2, ..ModelConfig::toy() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = MaskedAutoencoder::new(cfg.clone(), &mut rng).unwrap();
        let pb = PretrainBatch::sample(toy_batch(&cfg, 2, 1), &cfg, &mut rng);
        assert!(m.loss(&pb).unwrap().is_finite());
        let z = m.encode(&pb.batch, None).unwrap();
        assert_eq!(z.shape(), &[2, 1 + 2 * 4, 16]);
    }

    #[test]
    fn unsorted_timesteps_rejected() {
        let t0 = Timestamp::from_calendar(2016, 1, 600, 0).unwrap();
        let t1 = Timestamp::from_calendar(2016, 1, 615, 0).unwrap();
        let x = Tensor::zeros(&[1, 2, 3, 8, 8]);
        assert!(PatchBatch::new(x.clone(), vec![vec![t1, t0]]).is_err());
        let late = Timestamp::from_calendar(2016, 1, 660, 0).unwrap();
        assert!(PatchBatch::new(x, vec![vec![t0, late]]).is_err());
    }
}
