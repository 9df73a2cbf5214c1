//! `tryon`: synthetic data, toy training and sampling, keyframe planning and evaluation.
//!
//! Every command writes into `--out` along with `config.toml` (the resolved
//! configuration) and `run.json` (command, config hash, inputs, outputs). Passing the
//! stored `config.toml` back with `--config` reproduces the run.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad usage or configuration, 3 missing
//! or unreadable input. Failures print one JSON line on stderr.

mod commands;
mod config;
mod error;
mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tryon_core::agnostic_loss::LossVariant;
use tryon_core::keyframes::KeyframeMode;

use crate::commands::Run;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tryon", version, about = "Toy video try-on experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Init,
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Greedy,
    Literal,
}

/// Settings that override the config file. Accepted by every subcommand.
#[derive(Debug, Args)]
struct Overrides {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    lambda_agn: Option<f64>,
    #[arg(long, global = true)]
    lambda_n: Option<f64>,
    #[arg(long, global = true)]
    d_pose: Option<f64>,
    #[arg(long, global = true)]
    s_max: Option<usize>,
    /// Generator window, for both single-pass and long generation.
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    overlap: Option<usize>,
    /// Consistency attention during training and sampling.
    #[arg(long, global = true, value_enum)]
    ct: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, global = true, value_enum)]
    keyframe_mode: Option<ModeArg>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Frames of the synthetic clip.
    #[arg(long, global = true)]
    frames: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic clip directory.
    GenData,
    /// Overfit the toy model on one clip; writes metrics.jsonl and model.ckpt.
    TrainToy {
        /// Clip directory with a target stream; a synthetic clip when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sample a clip of at most `window` frames.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the decoded state after every sampler step under steps/.
        #[arg(long)]
        debug_steps: bool,
    },
    /// Sample a clip of any length through keyframes and overlapping windows.
    LongInfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Keyframe and segment plan from a clip's DensePose stream.
    SelectKeyframes {
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment plan for a clip directory or `--frames` frames.
    PlanSegments {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// SSIM and flicker of a generated clip directory against a reference.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Train, probe and sample every (lambda_agn, consistency) cell.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One SVG curve per metric of a training log (file or run directory).
    Plot {
        #[arg(long)]
        metrics: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainToy { .. } => "train-toy",
            Command::Infer { .. } => "infer",
            Command::LongInfer { .. } => "long-infer",
            Command::SelectKeyframes { .. } => "select-keyframes",
            Command::PlanSegments { .. } => "plan-segments",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Plot { .. } => "plot",
        }
    }
}

fn apply_overrides(mut c: RunConfig, o: &Overrides) -> RunConfig {
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.lambda_agn {
        c.train.loss.lambda_agn = v;
    }
    if let Some(v) = o.lambda_n {
        c.train.loss.lambda_n = v;
    }
    if let Some(v) = o.d_pose {
        c.long.d_pose = v;
    }
    if let Some(v) = o.s_max {
        c.long.s_max = v;
    }
    if let Some(v) = o.window {
        c.infer.window = v;
        c.long.window = v;
    }
    if let Some(v) = o.overlap {
        c.long.overlap = v;
    }
    if let Some(v) = o.ct {
        c.train.consistency = v == Switch::On;
        c.infer.consistency = v == Switch::On;
    }
    if let Some(v) = o.loss {
        c.train.loss.variant = match v {
            LossArg::Init => LossVariant::Initial,
            LossArg::Refined => LossVariant::Refined,
        };
    }
    if let Some(v) = o.keyframe_mode {
        c.long.keyframe_mode = match v {
            ModeArg::Greedy => KeyframeMode::Greedy,
            ModeArg::Literal => KeyframeMode::Literal,
        };
    }
    if let Some(v) = o.steps {
        c.train.steps = v;
    }
    if let Some(v) = o.learning_rate {
        c.train.learning_rate = v;
    }
    if let Some(v) = o.frames {
        c.data.frames = v;
    }
    c
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    inputs: &'a BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let o = &cli.overrides;
    let base = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = apply_overrides(base, o).resolve()?;
    let hash = config.hash()?;
    let out = o
        .out
        .as_deref()
        .ok_or_else(|| CliError::usage("--out is required"))?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", out.display())))?;
    let mut run = Run {
        config: &config,
        out,
        inputs: BTreeMap::new(),
    };
    if let Some(path) = &o.config {
        run.inputs.insert("config".into(), path.display().to_string());
    }
    let outputs = match &cli.command {
        Command::GenData => commands::gen_data(&mut run),
        Command::TrainToy { data } => commands::train_toy(&mut run, data.as_deref()),
        Command::Infer { checkpoint, data, debug_steps } => {
            commands::infer(&mut run, checkpoint, data.as_deref(), *debug_steps)
        }
        Command::LongInfer { checkpoint, data } => commands::long_infer_cmd(&mut run, checkpoint, data.as_deref()),
        Command::SelectKeyframes { data } => commands::select_keyframes_cmd(&mut run, data),
        Command::PlanSegments { data } => commands::plan_segments_cmd(&mut run, data.as_deref()),
        Command::Eval { generated, reference } => commands::eval(&mut run, generated, reference, &hash),
        Command::Ablate { data } => commands::ablate(&mut run, data.as_deref()),
        Command::Plot { metrics } => commands::plot(&mut run, metrics),
    }?;
    write_run_files(out, &config, cli.command.name(), &hash, &run.inputs, outputs)
}

fn write_run_files(
    out: &Path,
    config: &RunConfig,
    command: &str,
    hash: &str,
    inputs: &BTreeMap<String, String>,
    mut outputs: Vec<String>,
) -> Result<(), CliError> {
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    outputs.push("config.toml".into());
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config_hash: hash,
        seed: config.seed,
        inputs,
        outputs,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(out.join("run.json"), text + "\n")?;
    eprintln!("config {hash}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage(config::one_line(&e.to_string()));
            eprintln!("{}", err.to_line());
            return ExitCode::from(err.kind.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_line());
            ExitCode::from(err.kind.exit_code() as u8)
        }
    }
}
