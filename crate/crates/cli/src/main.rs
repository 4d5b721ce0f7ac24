//! `stgaze` command-line front end.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::TrainArgs;
use config::RunConfig;
use error::CliError;

/// Gaze estimation from eye and face video: synthesis, training, evaluation.
#[derive(Debug, Parser)]
#[command(name = "stgaze", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset and print a summary line.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequences: usize,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train on a dataset; writes a checkpoint and a JSON-lines metrics log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset used for checkpoint selection.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// full, no_eca, no_sam, no_gru, pool_pre_gru, or all for the comparison table.
        #[arg(long)]
        ablation: Option<String>,
        /// Seeds per variant with `--ablation all`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Worker threads; results match single-threaded runs exactly.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print evaluation metrics of a checkpoint as one JSON line.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-frame CSV predictions for one sequence file.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence_file: PathBuf,
    },
    /// Finite-difference check of every layer family.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        scale: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Corrupt the backward rule of one op to confirm the check catches it.
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth {
            config,
            out: dir,
            sequences,
            split,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::synth(&cfg, &dir, sequences, &split, &mut out)
        }
        Command::Train {
            config,
            data,
            val,
            out: dir,
            ablation,
            seeds,
            threads,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let args = TrainArgs {
                data: &data,
                val: val.as_deref(),
                out_dir: &dir,
                ablation: ablation.as_deref(),
                threads,
                seeds,
            };
            commands::train_cmd(&cfg, &args, &mut out)
        }
        Command::Eval { config, checkpoint, data } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::eval_cmd(&cfg, &checkpoint, &data, &mut out)
        }
        Command::Predict {
            config,
            checkpoint,
            sequence_file,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::predict_cmd(&cfg, &checkpoint, &sequence_file, &mut out)
        }
        Command::Gradcheck {
            scale,
            seeds,
            inject_fault,
        } => commands::gradcheck_cmd(&scale, seeds, inject_fault.as_deref(), &mut out),
    }?;
    out.flush().map_err(|e| CliError::io(std::path::Path::new("<stdout>"), e))
}

fn main() -> ExitCode {
    let keys = config::help_text();
    let mut cmd = Cli::command().after_long_help(keys.clone());
    for name in ["synth", "train", "eval", "predict"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(keys.clone()));
    }
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
