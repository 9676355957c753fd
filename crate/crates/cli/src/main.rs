//! Command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const DEFAULTS_NOTE: &str = "\
Training defaults follow the published recipe: SGD with learning rate 0.01, \
momentum 0.9, weight decay 0.0005 and batch size 10. Model defaults are \
C = 96, depths [2, 2, 9, 2], state size 16, six classes and a 256 x 256 \
sliding window.

Exit status: 0 on success, 1 on invalid input or a failed check, 2 on a \
file system error.";

#[derive(Debug, Parser)]
#[command(name = "ppmamba", version, about = "Pyramid-pooling omnidirectional scan segmentation", after_help = DEFAULTS_NOTE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML). Missing keys take the defaults below.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: data.path from the config]
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train on the training split and write a checkpoint.
    #[command(after_help = DEFAULTS_NOTE)]
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory for train.log and model.ppmk.
        #[arg(long, value_name = "DIR", default_value = "run")]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split with sliding-window inference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Window stride [default: tiling.stride from the config, 256]
        #[arg(long, value_name = "INT")]
        stride: Option<usize>,
        #[arg(long, default_value = "val", value_parser = ["train", "val"])]
        split: String,
    },
    /// Predict a class map for one image tensor ([3, H, W], f32).
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Output directory for pred.ppmt and pred.ppm.
        #[arg(long, value_name = "DIR", default_value = "pred")]
        out: PathBuf,
        /// Window stride [default: tiling.stride from the config, 256]
        #[arg(long, value_name = "INT")]
        stride: Option<usize>,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck,
    /// Print shapes, parameter count and MACs of the configured model.
    Summarize {
        #[command(flatten)]
        common: Common,
        /// Square input size.
        #[arg(long, value_name = "INT", default_value_t = 256)]
        size: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth { common, out } => commands::synth(common.config.as_deref(), common.seed, out),
        Command::Train { common, out } => commands::train(common.config.as_deref(), common.seed, &out),
        Command::Eval { common, checkpoint, stride, split } => {
            commands::eval(common.config.as_deref(), &checkpoint, stride, &split)
        }
        Command::Infer { common, checkpoint, input, out, stride } => {
            commands::infer(common.config.as_deref(), &checkpoint, &input, &out, stride)
        }
        Command::Gradcheck => commands::gradcheck(),
        Command::Summarize { common, size } => commands::summarize(common.config.as_deref(), size),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
