//! `serpent`: verification, training and inspection commands.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{EvalSplit, OutDir};
use config::{ConfigBuilder, RunConfig};
use error::CliResult;

#[derive(Parser)]
#[command(name = "serpent", version, about = "Selective resampling SSM toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Reuse an existing output directory.
    #[arg(long)]
    force: bool,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Leave-one-out linearity sweep over seeded random instances.
    VerifyProp(Common),
    /// Train a classifier on the sparse-signal task.
    Train(Common),
    /// Evaluate a checkpoint on the dataset it was trained on.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: EvalSplit,
    },
    /// Write the convolution kernel of an LTI SSM as CSV.
    DumpKernel(Common),
    /// Resample a CSV sequence and write the routing as JSON.
    CompressTrace {
        #[command(flatten)]
        common: Common,
        /// Numeric CSV, one row per position.
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut builder = ConfigBuilder::new();
    if let Some(path) = &common.config {
        builder.merge_file(path)?;
    }
    for spec in &common.set {
        builder.apply_override(spec)?;
    }
    if let Some(seed) = common.seed {
        builder.set_seed(seed)?;
    }
    builder.build()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::VerifyProp(c) => commands::verify_prop(&load_config(&c)?, || OutDir::prepare(&c.out, c.force)),
        Command::Train(c) => commands::train_cmd(&load_config(&c)?, || OutDir::prepare(&c.out, c.force)),
        Command::Eval {
            common: c,
            checkpoint,
            split,
        } => {
            load_config(&c)?;
            commands::eval_cmd(&checkpoint, split, || OutDir::prepare(&c.out, c.force))
        }
        Command::DumpKernel(c) => commands::dump_kernel(&load_config(&c)?, || OutDir::prepare(&c.out, c.force)),
        Command::CompressTrace { common: c, input } => {
            commands::compress_trace(&load_config(&c)?, &input, || OutDir::prepare(&c.out, c.force))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
