use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use hfm_core::data::{fire_train_filter, multi_timestep_samples, Manifest, PatchSample};
use hfm_core::harness::{
    aggregate_runs, evaluate, fit, pretrain as run_pretrain, render_table, toy_model_checks, Checkpoint, FitResult,
    PretrainRun, RunConfig, DEFAULT_JITTER, WEIGHT_GRID,
};
use hfm_core::mae::{MaskMode, MaskedAutoencoder, ModelConfig};
use hfm_core::numerics::GradCheckConfig;
use hfm_core::seg::{LossKind, SegConfig, SegmentationModel};
use hfm_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::data::Task;
use crate::Failure;

#[derive(Clone, Copy, ValueEnum)]
pub enum Masking {
    Independent,
    Consistent,
}

/// Architecture flags, used when no checkpoint supplies the configuration.
#[derive(Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 1)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 768)]
    pub dim: usize,
    #[arg(long, default_value_t = 12)]
    pub depth: usize,
    #[arg(long, default_value_t = 12)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
    #[arg(long, default_value_t = 512)]
    pub decoder_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub decoder_depth: usize,
    #[arg(long, default_value_t = 8)]
    pub decoder_heads: usize,
    #[arg(long, default_value_t = 4)]
    pub token_size: usize,
    #[arg(long, default_value_t = 1)]
    pub spectral_groups: usize,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f64,
    #[arg(long, value_enum, default_value_t = Masking::Independent)]
    pub masking: Masking,
}

impl ModelArgs {
    fn config(&self, image_size: usize, bands: usize) -> ModelConfig {
        ModelConfig {
            image_size,
            token_size: self.token_size,
            bands,
            embed_dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            decoder_dim: self.decoder_dim,
            decoder_depth: self.decoder_depth,
            decoder_heads: self.decoder_heads,
            mask_ratio: self.mask_ratio,
            timesteps: self.timesteps,
            spectral_groups: self.spectral_groups,
            mask_mode: match self.masking {
                Masking::Independent => MaskMode::Independent,
                Masking::Consistent => MaskMode::ConsistentAcrossTime,
            },
            ..ModelConfig::default()
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Loads a manifest split, grouping acquisitions into three-step samples when `timesteps` is 3.
fn load_split(manifest: &Path, split: &str, timesteps: usize, seed: u64) -> Result<Vec<PatchSample>> {
    let m = Manifest::read(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let singles = m.load_split(split, base).with_context(|| format!("loading split {split}"))?;
    let samples = match timesteps {
        1 => singles,
        3 => multi_timestep_samples(&singles, &mut rng(seed))?,
        t => anyhow::bail!(Error::invalid(format!("timesteps {t}: expected 1 or 3"))),
    };
    if samples.is_empty() {
        anyhow::bail!(Error::invalid(format!("split {split} of {} has no usable samples", manifest.display())));
    }
    Ok(samples)
}

fn dims(samples: &[PatchSample]) -> (usize, usize) {
    let s = samples[0].data.shape();
    (s[2], s[1])
}

fn write_lines(path: Option<&Path>, lines: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, lines).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{lines}");
            Ok(())
        }
    }
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Manifest of unlabeled patches.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step losses as JSON lines; stdout when omitted.
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let samples = load_split(&a.data, &a.split, a.model.timesteps, a.seed)?;
    let (image_size, bands) = dims(&samples);
    let mut model = MaskedAutoencoder::new(a.model.config(image_size, bands), &mut rng(a.seed))?;
    let run = PretrainRun {
        seed: a.seed,
        batch_size: a.batch,
        lr: a.lr,
        epochs: a.epochs,
        max_steps: a.max_steps,
        ..PretrainRun::default()
    };
    let losses = run_pretrain(&run, &mut model, &samples)?;
    let mut ckpt = Checkpoint::from_mae(&model);
    ckpt.meta.extra = json!({ "run": run, "samples": samples.len() });
    ckpt.save(&a.out)?;
    let lines: String = losses.iter().enumerate().map(|(i, l)| format!("{}\n", json!({ "step": i, "loss": l }))).collect();
    write_lines(a.losses.as_deref(), &lines)?;
    if a.losses.is_some() {
        println!("{}", json!({ "steps": losses.len(), "final_loss": losses.last(), "out": a.out }));
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Loss {
    Wce,
    Dice,
}

impl From<Loss> for LossKind {
    fn from(l: Loss) -> Self {
        match l {
            Loss::Wce => LossKind::WeightedCe,
            Loss::Dice => LossKind::Dice,
        }
    }
}

/// Options shared by single fine-tuning runs and sweeps.
#[derive(Args)]
pub struct TrainArgs {
    /// Manifest with `train` and `validation` splits.
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained checkpoint, or `none` to train from scratch.
    #[arg(long, default_value = "none")]
    pub ckpt: String,
    #[arg(long, value_enum, default_value_t = Task::Fire)]
    pub task: Task,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub augment: Switch,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "256,128")]
    pub decoder_channels: Vec<usize>,
    /// Seed of multi-timestep sample selection.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
}

struct Prepared {
    pretrained: Option<Checkpoint>,
    model_cfg: ModelConfig,
    train: Vec<PatchSample>,
    val: Vec<PatchSample>,
}

impl TrainArgs {
    fn prepare(&self) -> Result<Prepared> {
        let pretrained = match self.ckpt.as_str() {
            "none" => None,
            p => Some(Checkpoint::load(Path::new(p)).with_context(|| format!("loading checkpoint {p}"))?),
        };
        let timesteps = pretrained.as_ref().map_or(self.model.timesteps, |c| c.meta.model.timesteps);
        let mut train = load_split(&self.data, "train", timesteps, self.data_seed)?;
        if matches!(self.task, Task::Fire) {
            train = fire_train_filter(train, "train");
        }
        let val = load_split(&self.data, "validation", timesteps, self.data_seed)?;
        if train.is_empty() {
            anyhow::bail!(Error::invalid("no training sample has a positive pixel"));
        }
        let (image_size, bands) = dims(&train);
        let model_cfg = match &pretrained {
            Some(c) => c.meta.model.clone(),
            None => self.model.config(image_size, bands),
        };
        if (model_cfg.image_size, model_cfg.bands) != (image_size, bands) {
            anyhow::bail!(Error::invalid(format!(
                "checkpoint expects {}px × {} bands, data has {image_size}px × {bands} bands",
                model_cfg.image_size, model_cfg.bands
            )));
        }
        Ok(Prepared { pretrained, model_cfg, train, val })
    }

    fn run(&self, p: &Prepared, loss: LossKind, class_weights: (f64, f64), seed: u64) -> Result<(SegmentationModel, RunConfig, FitResult)> {
        let seg = SegConfig { decoder_channels: self.decoder_channels.clone(), class_weights, ..SegConfig::with_loss(loss) };
        let mut model = SegmentationModel::new(p.model_cfg.clone(), seg, &mut rng(seed))?;
        if let Some(c) = &p.pretrained {
            if model.load_encoder(&c.params)? == 0 {
                anyhow::bail!(Error::invalid(format!("checkpoint {} holds no encoder parameters", self.ckpt)));
            }
        }
        let run = RunConfig {
            seed,
            loss_kind: loss,
            class_weights,
            augment: self.augment == Switch::On,
            batch_size: self.batch,
            lr: self.lr,
            max_epochs: self.epochs,
            monitor: loss.monitor(),
            ..RunConfig::default()
        };
        let result = fit(&run, &mut model, &p.train, &p.val)?;
        model.params = result.best_params.clone();
        Ok((model, run, result))
    }
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum, default_value_t = Loss::Wce)]
    pub loss: Loss,
    #[arg(long, default_value_t = 1.0)]
    pub w_neg: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_pos: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint of the best validation epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history as JSON lines; stdout when omitted.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let prepared = a.train.prepare()?;
    let (model, run, result) = a.train.run(&prepared, a.loss.into(), (a.w_neg, a.w_pos), a.seed)?;
    let mut ckpt = Checkpoint::from_seg(&model);
    ckpt.meta.extra = json!({
        "run": run,
        "task": format!("{:?}", a.train.task).to_lowercase(),
        "best_epoch": result.best_epoch,
        "best_value": result.best_value,
    });
    ckpt.save(&a.out)?;
    write_lines(a.history.as_deref(), &result.history.to_jsonl()?)?;
    if a.history.is_some() {
        println!("{}", json!({ "best_epoch": result.best_epoch, "best_value": result.best_value, "out": a.out }));
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write the report JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let model = ckpt.to_seg()?;
    let samples = load_split(&a.data, &a.split, model.model_cfg.timesteps, a.data_seed)?;
    let report = evaluate(&model, &samples, a.batch)?;
    let line = json!({ "split": a.split, "samples": samples.len(), "confusion": report.confusion, "metrics": report.metrics });
    if let Some(p) = &a.report {
        fs::write(p, format!("{line}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{line}");
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Grid {
    /// The weighted cross-entropy class-weight grid.
    Weights,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum, default_value_t = Grid::Weights)]
    pub grid: Grid,
    /// `a..b` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "0..4", value_parser = parse_seeds)]
    pub seeds: Seeds,
    #[arg(long, default_value = "test")]
    pub eval_split: String,
    /// Print a mean ± std table after the per-run lines.
    #[arg(long)]
    pub aggregate: bool,
}

#[derive(Clone, Debug)]
pub struct Seeds(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> std::result::Result<Seeds, String> {
    let bad = || format!("invalid seed list {s:?}");
    let seeds: Vec<u64> = match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            (a..=b).collect()
        }
        None => s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<std::result::Result<_, _>>()?,
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(Seeds(seeds))
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let prepared = a.train.prepare()?;
    let timesteps = prepared.model_cfg.timesteps;
    let eval_set = load_split(&a.train.data, &a.eval_split, timesteps, a.train.data_seed)?;
    let Grid::Weights = a.grid;
    let mut rows = Vec::new();
    for w in WEIGHT_GRID {
        let mut runs: Vec<BTreeMap<String, f64>> = Vec::new();
        for &seed in &a.seeds.0 {
            let (model, _, result) = a.train.run(&prepared, LossKind::WeightedCe, w, seed)?;
            let report = evaluate(&model, &eval_set, a.train.batch)?;
            println!(
                "{}",
                json!({ "weights": [w.0, w.1], "seed": seed, "best_epoch": result.best_epoch, "metrics": report.metrics })
            );
            runs.push(report.metrics);
        }
        rows.push((format!("wce {}:{}", w.0, w.1), aggregate_runs(&runs)?));
    }
    if a.aggregate {
        print!("{}", render_table(&rows));
    }
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum CheckScale {
    Toy,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = CheckScale::Toy)]
    pub config: CheckScale,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    /// Noise added to parameters before checking.
    #[arg(long, default_value_t = DEFAULT_JITTER)]
    pub jitter: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 24)]
    pub coords: usize,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let CheckScale::Toy = a.config;
    let cfg = GradCheckConfig { h: a.h, tol: a.tol, max_coords_per_param: a.coords, ..GradCheckConfig::default() };
    let checks = toy_model_checks(&cfg, a.jitter)?;
    let mut failed = Vec::new();
    for c in &checks {
        let r = &c.report;
        println!(
            "{}",
            json!({ "check": c.name, "passed": r.passed, "max_rel_error": r.max_rel_error, "checked": r.checked })
        );
        if !r.passed {
            failed.push(c.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Failure { kind: "gradcheck_failed", message: format!("failed: {}", failed.join(", ")) }.into());
    }
    Ok(())
}
