//! `femba`: synthetic data, pre-training, fine-tuning, evaluation,
//! reconstruction and cost profiling from the command line.

mod commands;
mod config;
mod dataset;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "femba", version, about = "Bidirectional state-space EEG models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (a file for `reconstruct`).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Model preset: tiny, base, large, huge or custom.
    #[arg(long)]
    pub variant: Option<String>,
    /// Any config key, e.g. `--set train.adam.eps=1e-6`. Values parse as
    /// TOML, falling back to a bare string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded synthetic recordings with annotation sidecars.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Number of recordings.
        #[arg(long)]
        recordings: Option<usize>,
        /// Seconds per recording.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Masked-reconstruction pre-training.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Recording file or directory of .eegb/.csv files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Supervised fine-tuning, optionally from a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint whose tokenizer and encoder weights are loaded.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labeling scheme: bc, mc, mmc, mcc, abnormal or slowing4.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Train the head only.
        #[arg(long)]
        freeze_encoder: bool,
    },
    /// Metrics of a fine-tuned checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Windows to score.
        #[arg(long, value_enum, default_value = "test")]
        split: commands::EvalSplit,
    },
    /// Reconstruct one masked window with a pre-trained checkpoint.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index of the window among all input windows.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Analytic parameter, FLOP and peak-memory counts.
    Profile {
        #[command(flatten)]
        common: Common,
        /// encoder, pretrain or classifier.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        memory_batch: Option<usize>,
    },
    /// Forward wall-clock versus sequence length, encoder against attention.
    BenchScaling {
        #[command(flatten)]
        common: Common,
        /// Comma-separated token counts.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Profile { .. } => "profile",
            Command::BenchScaling { .. } => "bench-scaling",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenSynth { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Reconstruct { common, .. }
            | Command::Profile { common, .. }
            | Command::BenchScaling { common, .. } => common,
        }
    }

    /// Flag values as dotted config paths, in the order they apply.
    pub fn overrides(&self) -> Result<Vec<(String, Value)>, ConfigError> {
        let mut out = Vec::new();
        let c = self.common();
        if let Some(s) = c.seed {
            let s = i64::try_from(s).map_err(|_| ConfigError {
                field: "seed".into(),
                detail: format!("{s} does not fit in a signed 64-bit integer"),
            })?;
            out.push(("seed".into(), Value::Integer(s)));
        }
        if let Some(v) = &c.variant {
            out.push(("model.name".into(), Value::String(v.clone())));
        }
        let int = |v: usize| Value::Integer(v as i64);
        let mut push = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        match self {
            Command::GenSynth { recordings, duration, .. } => {
                push("data.recordings", recordings.map(int));
                push("synth.duration_s", duration.map(Value::Float));
            }
            Command::Pretrain { steps, batch_size, lr, .. } => {
                push("train.total_steps", steps.map(|s| Value::Integer(s as i64)));
                push("train.batch_size", batch_size.map(int));
                push("train.base_lr", lr.map(Value::Float));
            }
            Command::Finetune {
                scheme,
                epochs,
                batch_size,
                lr,
                freeze_encoder,
                ..
            } => {
                push("data.scheme", scheme.clone().map(Value::String));
                push("train.epochs", epochs.map(int));
                push("train.batch_size", batch_size.map(int));
                push("train.base_lr", lr.map(Value::Float));
                push("train.freeze_encoder", freeze_encoder.then_some(Value::Boolean(true)));
            }
            Command::Profile {
                task,
                batch,
                memory_batch,
                ..
            } => {
                push("profile.task", task.clone().map(Value::String));
                push("profile.batch", batch.map(int));
                push("profile.memory_batch", memory_batch.map(int));
            }
            Command::BenchScaling { lengths, reps, .. } => {
                push("bench.lengths", lengths.as_ref().map(|l| Value::Array(l.iter().map(|&v| int(v)).collect())));
                push("bench.reps", reps.map(int));
            }
            Command::Eval { .. } | Command::Reconstruct { .. } => {}
        }
        for kv in &c.set {
            let (k, raw) = kv.split_once('=').ok_or_else(|| ConfigError {
                field: kv.clone(),
                detail: "expected KEY=VALUE".into(),
            })?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| Value::String(raw.to_string()));
            out.push((k.trim().to_string(), value));
        }
        Ok(out)
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("FEMBA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("FEMBA_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| commands::run(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
