//! `evsnn`: synthesize event data, preprocess it into frame clips, train and
//! evaluate spiking networks, and inspect the binary artifacts.
//!
//! Exit codes: 0 success, 2 validation, 3 state or compatibility, 4 I/O.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use evsnn_core::Error;

use config::Settings;

#[derive(Parser, Debug)]
#[command(name = "evsnn", version, about = "Spiking networks for event-camera action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic moving-bar dataset (EVT1 files plus labels.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        clips: usize,
        /// Sensor width and height.
        #[arg(long, default_value_t = 32)]
        size: u32,
        #[arg(long, default_value_t = 2000)]
        events: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Integrate event files into T-frame FRC1 clips.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: usize,
        /// Store occupancy (0/1) instead of counts.
        #[arg(long)]
        binarize: bool,
    },
    /// Train a network on preprocessed clips.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracy and the confusion table of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarize an EVT1, FRC1 or CKPT1 file.
    Inspect { file: PathBuf },
}

/// Configuration sources shared by train and eval. Precedence, lowest first:
/// config file, `--set`, named flags.
#[derive(Args, Debug)]
struct RunArgs {
    /// Directory with FRC1 clips and labels.csv.
    #[arg(long)]
    data: PathBuf,
    /// `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set channels=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    segments: Option<String>,
    #[arg(long)]
    frames_per_segment: Option<String>,
    #[arg(long)]
    consensus: Option<String>,
    #[arg(long)]
    clip_norm: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
}

impl RunArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Settings::parse(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => Settings::default(),
        };
        for pair in &self.set {
            s.set_pair(pair)?;
        }
        let flags = [
            ("model", &self.model),
            ("segments", &self.segments),
            ("frames_per_segment", &self.frames_per_segment),
            ("consensus", &self.consensus),
            ("clip_norm", &self.clip_norm),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("checkpoint_every", &self.checkpoint_every),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                s.set(key, v)?;
            }
        }
        Ok(s)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, clips, size, events, seed } => commands::synth(&out, clips, size, events, seed),
        Command::Preprocess { input, out, frames, binarize } => commands::preprocess(&input, &out, frames, binarize),
        Command::Train { run, out } => commands::train(&run.settings()?, &run.data, &out),
        Command::Eval { run, checkpoint } => {
            print!("{}", commands::eval(&run.settings()?, &checkpoint, &run.data)?);
            Ok(())
        }
        Command::Inspect { file } => {
            print!("{}", commands::inspect(&file)?);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Format(_)
                | Error::InvalidRecord { .. }
                | Error::Validation(_)
                | Error::Shape(_)
                | Error::InsufficientEvents { .. }
                | Error::Infeasible(_) => 2,
                Error::State(_) | Error::Compat(_) => 3,
                Error::Io(_) => 4,
                Error::Numeric { .. } | Error::Internal(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<csv::Error>() {
            return if e.is_io_error() { 4 } else { 2 };
        }
    }
    1
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
