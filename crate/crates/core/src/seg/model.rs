use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LossKind, SegConfig};
use super::losses::{dice_loss, predict_mask, weighted_ce};
use crate::error::{Error, Result};
use crate::mae::{Encoder, ModelConfig, PatchBatch};
use crate::nn::{Bound, Conv2d, ConvTranspose2d, ParamStore};
use crate::numerics::{Tape, Tensor, Var};

/// Inputs with binary targets for the most recent timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct SegBatch {
    pub batch: PatchBatch,
    /// `[B, H, W]` with entries in {0, 1}.
    pub targets: Tensor,
}

impl SegBatch {
    pub fn new(batch: PatchBatch, targets: Tensor) -> Result<Self> {
        let s = batch.inputs.shape();
        if targets.shape() != [s[0], s[3], s[4]] {
            return Err(Error::shape("seg_batch", targets.shape(), &[s[0], s[3], s[4]]));
        }
        if let Some(&v) = targets.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinary(v));
        }
        Ok(SegBatch { batch, targets })
    }
}

/// Drops the class token, keeps the last timestep and lays the tokens out
/// as `[B, d, g, g]`. With several spectral groups their tokens are averaged.
pub fn tokens_to_grid_on(tape: &mut Tape, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let per_step = cfg.tokens_per_step();
    if s.len() != 3 || s[1] != 1 + cfg.n_tokens() {
        return Err(Error::shape("tokens_to_grid", &s, &[1 + cfg.n_tokens()]));
    }
    let (b, d, cells, g) = (s[0], s[2], cfg.cells(), cfg.spectral_groups);
    let last = tape.narrow(x, 1, 1 + (cfg.timesteps - 1) * per_step, per_step)?;
    let tokens = if g == 1 {
        last
    } else {
        let grouped = tape.reshape(last, &[b, g, cells, d])?;
        let mut acc = tape.narrow(grouped, 1, 0, 1)?;
        for gi in 1..g {
            let part = tape.narrow(grouped, 1, gi, 1)?;
            acc = tape.add(acc, part)?;
        }
        let acc = tape.scale(acc, 1.0 / g as f64);
        tape.reshape(acc, &[b, cells, d])?
    };
    let t = tape.permute(tokens, &[0, 2, 1])?;
    tape.reshape(t, &[b, d, cfg.grid(), cfg.grid()])
}

pub fn tokens_to_grid(encoder_out: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(encoder_out.clone());
    let g = tokens_to_grid_on(&mut tape, x, cfg)?;
    Ok(tape.value(g).clone())
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResidualBlock {
    /// `gelu(x + c2(gelu(c1(x))))`.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.c1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = self.c2.forward(tape, p, h)?;
        let y = tape.add(x, h)?;
        Ok(tape.gelu(y))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    up: ConvTranspose2d,
    blocks: Vec<ResidualBlock>,
}

/// Upsampling decoder from the token grid to per-pixel class logits.
#[derive(Debug, Clone)]
pub struct SegHead {
    proj: Conv2d,
    stages: Vec<Stage>,
    classify: Conv2d,
}

impl SegHead {
    /// Registers `head.*` parameters.
    pub fn new(store: &mut ParamStore, d: usize, cfg: &SegConfig, rng: &mut impl Rng) -> Self {
        let ch = &cfg.decoder_channels;
        let proj = Conv2d::new(store, "head.proj", d, ch[0], 1, rng);
        let mut c_prev = ch[0];
        let stages = ch
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let up = ConvTranspose2d::new(store, &format!("head.stages.{i}.up"), c_prev, c, 2, 2, rng);
                let blocks = (0..cfg.residual_blocks_per_stage)
                    .map(|j| ResidualBlock {
                        c1: Conv2d::new(store, &format!("head.stages.{i}.res.{j}.conv1"), c, c, 3, rng),
                        c2: Conv2d::new(store, &format!("head.stages.{i}.res.{j}.conv2"), c, c, 3, rng),
                    })
                    .collect();
                c_prev = c;
                Stage { up, blocks }
            })
            .collect();
        let classify = Conv2d::new(store, "head.classify", c_prev, cfg.n_classes, 1, rng);
        SegHead { proj, stages, classify }
    }

    /// `[B, d, g, g]` → `[B, 2, g·2^stages, g·2^stages]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, grid: Var) -> Result<Var> {
        let mut x = self.proj.forward(tape, p, grid)?;
        for st in &self.stages {
            x = st.up.forward(tape, p, x)?;
            x = tape.gelu(x);
            for blk in &st.blocks {
                x = blk.forward(tape, p, x)?;
            }
        }
        self.classify.forward(tape, p, x)
    }
}

/// Pretrained-style encoder plus segmentation head, trained end to end.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    pub model_cfg: ModelConfig,
    pub seg_cfg: SegConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub head: SegHead,
}

impl SegmentationModel {
    pub fn new(model_cfg: ModelConfig, seg_cfg: SegConfig, rng: &mut impl Rng) -> Result<Self> {
        model_cfg.validate()?;
        seg_cfg.validate(&model_cfg)?;
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &model_cfg, rng);
        let head = SegHead::new(&mut params, model_cfg.embed_dim, &seg_cfg, rng);
        Ok(SegmentationModel { model_cfg, seg_cfg, params, encoder, head })
    }

    /// Rebuilds the model around previously saved parameters.
    pub fn from_params(model_cfg: ModelConfig, seg_cfg: SegConfig, saved: &ParamStore) -> Result<Self> {
        let mut m = Self::new(model_cfg, seg_cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        m.params.load_from(saved)?;
        Ok(m)
    }

    /// Copies every `encoder.*` tensor from a pretrained store.
    pub fn load_encoder(&mut self, pretrained: &ParamStore) -> Result<usize> {
        self.params.load_matching(pretrained, "encoder.")
    }

    pub fn logits_on(&self, tape: &mut Tape, p: &Bound, batch: &PatchBatch) -> Result<Var> {
        let z = self.encoder.forward(tape, p, &self.model_cfg, batch, None)?;
        let grid = tokens_to_grid_on(tape, z, &self.model_cfg)?;
        self.head.forward(tape, p, grid)
    }

    pub fn loss_on(&self, tape: &mut Tape, p: &Bound, batch: &SegBatch) -> Result<Var> {
        let logits = self.logits_on(tape, p, &batch.batch)?;
        match self.seg_cfg.loss_kind {
            LossKind::WeightedCe => weighted_ce(tape, logits, &batch.targets, self.seg_cfg.class_weights),
            LossKind::Dice => dice_loss(tape, logits, &batch.targets, self.seg_cfg.dice_eps),
        }
    }

    pub fn logits(&self, batch: &PatchBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let l = self.logits_on(&mut tape, &p, batch)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, batch: &PatchBatch) -> Result<Tensor> {
        predict_mask(&self.logits(batch)?)
    }

    pub fn loss(&self, batch: &SegBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let l = self.loss_on(&mut tape, &p, batch)?;
        tape.value(l).item()
    }
}

/// One of the eight symmetries of the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flip {
    pub horizontal: bool,
    pub vertical: bool,
    /// Number of counter-clockwise quarter turns, applied after the flips.
    pub quarter_turns: u8,
}

impl Flip {
    /// Each of horizontal flip, vertical flip and a quarter turn with
    /// probability 1/2.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Flip {
            horizontal: rng.random_bool(0.5),
            vertical: rng.random_bool(0.5),
            quarter_turns: u8::from(rng.random_bool(0.5)),
        }
    }

    /// Source pixel of output pixel `(y, x)` in an `n × n` image.
    fn source(&self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        for _ in 0..self.quarter_turns % 4 {
            // out(y, x) = in(x, n-1-y) for a counter-clockwise turn
            (y, x) = (x, n - 1 - y);
        }
        if self.vertical {
            y = n - 1 - y;
        }
        if self.horizontal {
            x = n - 1 - x;
        }
        (y, x)
    }

    /// Applies the transform to every `n × n` plane of `data`.
    pub fn apply(&self, data: &[f64], n: usize) -> Vec<f64> {
        let plane = n * n;
        let mut out = vec![0.0; data.len()];
        for (src, dst) in data.chunks(plane).zip(out.chunks_mut(plane)) {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = self.source(y, x, n);
                    dst[y * n + x] = src[sy * n + sx];
                }
            }
        }
        out
    }
}

/// Applies independent random flips/turns to each sample, jointly to its
/// inputs and mask.
pub fn augment(batch: &SegBatch, rng: &mut impl Rng) -> Result<SegBatch> {
    let s = batch.batch.inputs.shape().to_vec();
    let (b, n) = (s[0], s[3]);
    if s[3] != s[4] {
        return Err(Error::shape("augment", &s, &[]));
    }
    let per_in = batch.batch.inputs.numel() / b.max(1);
    let per_mask = n * n;
    let mut inputs = Vec::with_capacity(batch.batch.inputs.numel());
    let mut targets = Vec::with_capacity(batch.targets.numel());
    for i in 0..b {
        let f = Flip::sample(rng);
        inputs.extend(f.apply(&batch.batch.inputs.data()[i * per_in..(i + 1) * per_in], n));
        targets.extend(f.apply(&batch.targets.data()[i * per_mask..(i + 1) * per_mask], n));
    }
    Ok(SegBatch {
        batch: PatchBatch { inputs: Tensor::new(s, inputs)?, timestamps: batch.batch.timestamps.clone() },
        targets: Tensor::new(batch.targets.shape().to_vec(), targets)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encodings::Timestamp;

    fn small_seg() -> SegConfig {
        SegConfig { decoder_channels: vec![6, 4], ..SegConfig::default() }
    }

    fn batch(cfg: &ModelConfig, b: usize, seed: u64) -> PatchBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_size;
        let x = Tensor::from_fn(&[b, cfg.timesteps, cfg.bands, n, n], |_| rng.random_range(-1.0..1.0));
        let ts = vec![
            (0..cfg.timesteps)
                .map(|t| Timestamp::from_calendar(2021, 200, 700 + 15 * t as u32, 0).unwrap())
                .collect::<Vec<_>>();
            b
        ];
        PatchBatch::new(x, ts).unwrap()
    }

    #[test]
    fn grid_extraction_picks_last_timestep() {
        for t in [1usize, 3] {
            let cfg = ModelConfig { timesteps: t, ..Default::default() };
            let d = 6;
            let n = 1 + t * 64;
            let z = Tensor::from_fn(&[2, n, d], |i| i as f64);
            let g = tokens_to_grid(&z, &cfg).unwrap();
            assert_eq!(g.shape(), &[2, d, 8, 8]);
            for b in 0..2 {
                for y in 0..8 {
                    for x in 0..8 {
                        for c in 0..d {
                            let tok = 1 + (t - 1) * 64 + y * 8 + x;
                            assert_eq!(g.get(&[b, c, y, x]), z.get(&[b, tok, c]));
                        }
                    }
                }
            }
        }
        let cfg = ModelConfig::default();
        assert!(tokens_to_grid(&Tensor::zeros(&[1, 64, 6]), &cfg).is_err());
    }

    #[test]
    fn head_output_shape_and_constant_on_zero_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = small_seg();
        let head = SegHead::new(&mut store, 12, &cfg, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let g = tape.constant(Tensor::zeros(&[2, 12, 8, 8]));
        let out = head.forward(&mut tape, &p, g).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[2, 2, 32, 32]);
        for c in 0..2 {
            let first = v.get(&[0, c, 0, 0]);
            for b in 0..2 {
                for y in 0..32 {
                    for x in 0..32 {
                        assert_eq!(v.get(&[b, c, y, x]), first);
                    }
                }
            }
        }
    }

    #[test]
    fn one_cell_reaches_only_its_receptive_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = SegHead::new(&mut store, 8, &small_seg(), &mut rng);
        let run = |grid: &Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let g = tape.constant(grid.clone());
            let o = head.forward(&mut tape, &p, g).unwrap();
            tape.value(o).clone()
        };
        let base = Tensor::from_fn(&[1, 8, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
        let a = run(&base);
        let (cy, cx) = (3usize, 5usize);
        let mut pert = base.clone();
        for c in 0..8 {
            pert.set(&[0, c, cy, cx], pert.get(&[0, c, cy, cx]) + 1.0);
        }
        let b = run(&pert);
        // Two k2/s2 up-convs and a pair of 3×3 convs at each scale.
        let lo = |v: usize| (4 * v) as i64 - 6;
        let hi = |v: usize| (4 * v) as i64 + 9;
        let mut changed = 0;
        for c in 0..2 {
            for y in 0..32i64 {
                for x in 0..32i64 {
                    let diff = a.get(&[0, c, y as usize, x as usize]) != b.get(&[0, c, y as usize, x as usize]);
                    let inside = (lo(cy)..=hi(cy)).contains(&y) && (lo(cx)..=hi(cx)).contains(&x);
                    if diff {
                        changed += 1;
                        assert!(inside, "logit ({y},{x}) changed outside the receptive field");
                    }
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn segmentation_forward_and_load_encoder() {
        let cfg = ModelConfig { embed_dim: 12, heads: 2, depth: 1, mlp_ratio: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = SegmentationModel::new(cfg.clone(), small_seg(), &mut rng).unwrap();
        let pb = batch(&cfg, 2, 3);
        assert_eq!(m.logits(&pb).unwrap().shape(), &[2, 2, 32, 32]);
        let mae = crate::mae::MaskedAutoencoder::new(ModelConfig { decoder_dim: 8, ..cfg.clone() }, &mut rng).unwrap();
        let copied = m.load_encoder(&mae.params).unwrap();
        assert_eq!(copied, m.params.names().iter().filter(|n| n.starts_with("encoder.")).count());
        let i = m.params.position("encoder.cls_token").unwrap();
        let j = mae.params.position("encoder.cls_token").unwrap();
        assert_eq!(m.params.tensors()[i], mae.params.tensors()[j].clone().with_requires_grad());
    }

    #[test]
    fn flips_are_joint_and_invertible() {
        let f = Flip { horizontal: true, vertical: false, quarter_turns: 1 };
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let once = f.apply(&img, 4);
        assert_ne!(once, img);
        let mut four = img.clone();
        let turn = Flip { quarter_turns: 1, ..Flip::default() };
        for _ in 0..4 {
            four = turn.apply(&four, 4);
        }
        assert_eq!(four, img);
        // Counter-clockwise: top-right corner moves to top-left.
        assert_eq!(turn.apply(&img, 4)[0], 3.0);

        let cfg = ModelConfig::toy();
        let pb = batch(&cfg, 3, 0);
        let targets = Tensor::from_fn(&[3, 8, 8], |i| ((i * 7) % 5 == 0) as u8 as f64);
        let sb = SegBatch::new(pb, targets).unwrap();
        let aug = augment(&sb, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(aug.targets.sum(), sb.targets.sum());
        // Band 0 of each sample moves exactly like its mask.
        let mut marked = sb.clone();
        for i in 0..3 * 64 {
            let (b, p) = (i / 64, i % 64);
            marked.batch.inputs.data_mut()[b * 3 * 64 + p] = marked.targets.data()[i];
        }
        let aug = augment(&marked, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 0..3 * 64 {
            let (b, p) = (i / 64, i % 64);
            assert_eq!(aug.batch.inputs.data()[b * 3 * 64 + p], aug.targets.data()[i]);
        }
    }
}
