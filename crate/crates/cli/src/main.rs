//! `biscc` command-line entry point.

mod commands;
mod config;
mod error;
mod outdir;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Common, SweepParam};

#[derive(Parser, Debug)]
#[command(name = "biscc", version, about = "Weakly supervised temporal action localization with Bi-SCC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl From<CommonArgs> for Common {
    fn from(a: CommonArgs) -> Self {
        Common {
            config: a.config,
            seed: a.seed,
            out: a.out,
            force: a.force,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ParamArg {
    Alpha,
    Gamma,
    #[value(name = "k", alias = "K", alias = "variants")]
    K,
    #[value(name = "ctg_mode", alias = "ctg-mode")]
    CtgMode,
}

impl From<ParamArg> for SweepParam {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::Alpha => SweepParam::Alpha,
            ParamArg::Gamma => SweepParam::Gamma,
            ParamArg::K => SweepParam::K,
            ParamArg::CtgMode => SweepParam::CtgMode,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic co-scene dataset.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the mean-teacher baseline.
    TrainBaseline {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the baseline, then the Bi-SCC iterations.
    Train {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Detect actions in the test split with a checkpoint.
    Localize {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint, e.g. `original.student.ckpt`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score a detections file against the test split.
    Eval {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Detections CSV written by `localize`.
        #[arg(long)]
        detections: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train once per value of one parameter.
    Sweep {
        /// Dataset file written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Parameter to vary.
        #[arg(long, value_enum)]
        param: ParamArg,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Trace charts and a baseline vs Bi-SCC summary for a training run.
    Report {
        /// Output directory of a `train` run.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run(cmd: Command) -> error::Result<()> {
    match cmd {
        Command::GenData { common } => commands::gen_data(&common.into()),
        Command::TrainBaseline { data, common } => commands::train_baseline(&common.into(), &data),
        Command::Train { data, common } => commands::train(&common.into(), &data),
        Command::Localize {
            data,
            checkpoint,
            common,
        } => commands::localize(&common.into(), &data, &checkpoint),
        Command::Eval {
            data,
            detections,
            common,
        } => commands::eval(&common.into(), &data, &detections),
        Command::Sweep {
            data,
            param,
            values,
            common,
        } => commands::sweep(&common.into(), &data, param.into(), &values),
        Command::Report { run, common } => commands::report(&common.into(), &run),
    }
}

fn one_line(msg: &str) -> String {
    msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BISCC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("biscc: error: {}", first.trim_start_matches("error: "));
            return ExitCode::FAILURE;
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("biscc: error: {}", one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
