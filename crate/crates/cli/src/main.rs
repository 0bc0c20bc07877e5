//! Command-line driver for the corruption/unlearning/evaluation pipeline.
//!
//! Each subcommand runs the pipeline up to its stage; completed stages are
//! resumed from their persisted artifacts by hash match, so commands
//! compose: `lethe pretrain ...` followed by `lethe run-all ...` reuses the
//! pretrained checkpoint.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric/training
//! failure, 4 artifact-integrity failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lethe_core::pipeline::{run_pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "lethe", version, about = "Corrupt a tiny language model's factual knowledge, unlearn the corruption, and measure recovery")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// TOML pipeline configuration. Omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config file and LETHE_OUT).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,

    /// Context-dial values override, e.g. --k 0,1,2.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,

    /// Unlearning methods override: ga, kl, npo, task_vector.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the synthetic fact universe.
    GenUniverse(RunArgs),
    /// Render corpora, fit the tokenizer, and train the clean model.
    Pretrain(RunArgs),
    /// Corrupt the clean model for every configured k.
    Corrupt(RunArgs),
    /// Apply the configured unlearning methods.
    Unlearn(RunArgs),
    /// Evaluate clean, corrupted, and unlearned checkpoints.
    Evaluate(RunArgs),
    /// Build probe categories and log-probability reports.
    Probe(RunArgs),
    /// Emit the summary and dataset-statistics tables.
    Report(RunArgs),
    /// Run the complete pipeline.
    RunAll(RunArgs),
}

impl Cmd {
    fn split(self) -> (Stage, RunArgs) {
        match self {
            Cmd::GenUniverse(a) => (Stage::Universe, a),
            Cmd::Pretrain(a) => (Stage::Pretrain, a),
            Cmd::Corrupt(a) => (Stage::Corrupt, a),
            Cmd::Unlearn(a) => (Stage::Unlearn, a),
            Cmd::Evaluate(a) => (Stage::Evaluate, a),
            Cmd::Probe(a) => (Stage::Probe, a),
            Cmd::Report(a) => (Stage::Report, a),
            Cmd::RunAll(a) => (Stage::Report, a),
        }
    }
}

fn parse_method(name: &str) -> Result<lethe_core::unlearn::UnlearnMethod, String> {
    use lethe_core::unlearn::UnlearnMethod::*;
    match name {
        "ga" => Ok(Ga),
        "kl" => Ok(Kl),
        "npo" => Ok(Npo),
        "task_vector" | "tv" => Ok(TaskVector),
        other => Err(format!("unknown method {other} (expected ga, kl, npo, task_vector)")),
    }
}

fn run(stage: Stage, args: RunArgs) -> lethe_core::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(k) = args.k {
        cfg.corruption.k_values = k;
    }
    if let Some(methods) = args.methods {
        cfg.unlearn.methods = methods
            .iter()
            .map(|m| parse_method(m).map_err(lethe_core::Error::Config))
            .collect::<lethe_core::Result<Vec<_>>>()?;
    }

    let out_dir = args
        .out
        .or_else(|| std::env::var_os("LETHE_OUT").map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| {
            lethe_core::Error::Config(
                "no output directory: set --out, LETHE_OUT, or out_dir in the config".into(),
            )
        })?;

    let manifest = run_pipeline(&cfg, &out_dir, stage)?;
    println!(
        "ok: {} artifacts in {}",
        manifest.entries.len(),
        out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = cli.cmd.split();
    match run(stage, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
