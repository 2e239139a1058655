mod data;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hfm", version, about = "Pretrain, fine-tune and evaluate masked-autoencoder models on satellite patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes, cloud/land masks and label products.
    Synth(data::SynthArgs),
    /// Cut scenes into 32×32 patches and drop unusable ones.
    Tile(data::TileArgs),
    /// Pair image patches with the nearest label patch and write a manifest.
    Collocate(data::CollocateArgs),
    /// Assign manifest entries to splits by year.
    Split(data::SplitArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(train::PretrainArgs),
    /// Segmentation fine-tuning from a pretrained encoder or from scratch.
    Finetune(train::FinetuneArgs),
    /// Evaluate a segmentation checkpoint on one split.
    Eval(train::EvalArgs),
    /// Fine-tune over a class-weight grid and several seeds.
    Sweep(train::SweepArgs),
    /// Finite-difference check of every model loss.
    Gradcheck(train::GradcheckArgs),
}

/// Failure that carries its own machine-readable kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<hfm_core::Error>() {
            return err.kind();
        }
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "runtime"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => data::synth(a),
        Command::Tile(a) => data::tile(a),
        Command::Collocate(a) => data::collocate(a),
        Command::Split(a) => data::split(a),
        Command::Pretrain(a) => train::pretrain(a),
        Command::Finetune(a) => train::finetune(a),
        Command::Eval(a) => train::eval(a),
        Command::Sweep(a) => train::sweep(a),
        Command::Gradcheck(a) => train::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": error_kind(&e), "message": format!("{e:#}") } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
