//! `vsim`: train the semantic and visual label models, label image regions,
//! generate synthetic corpora and score the results.

mod config;
mod eval;
mod infer;
mod manifest;
mod oracle;
mod synth;
mod train;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use vsim::{ErrorClass, VsimError};

#[derive(Debug, Parser)]
#[command(name = "vsim", version, about = "Visual-semantic region labeling", propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Train(train::TrainArgs),
    Infer(infer::InferArgs),
    Synth(synth::SynthArgs),
    Eval(eval::EvalArgs),
    OracleCheck(oracle::OracleArgs),
}

const EXIT_OTHER: u8 = 1;
const EXIT_INGESTION: u8 = 2;
const EXIT_MODEL_MISMATCH: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<VsimError>() {
            return match e.class() {
                ErrorClass::Ingestion => EXIT_INGESTION,
                ErrorClass::ModelMismatch => EXIT_MODEL_MISMATCH,
                ErrorClass::Numerical => EXIT_NUMERICAL,
                ErrorClass::Other => EXIT_OTHER,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_INGESTION;
        }
    }
    EXIT_OTHER
}

fn workers_of(command: &Command) -> Option<usize> {
    match command {
        Command::Train(a) => a.common.workers,
        Command::Infer(a) => a.common.workers,
        Command::Synth(a) => a.common.workers,
        Command::Eval(a) => a.common.workers,
        Command::OracleCheck(a) => a.common.workers,
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers_of(&command) {
        anyhow::ensure!(n > 0, "--workers must be at least 1");
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    pool.install(|| match command {
        Command::Train(a) => train::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Synth(a) => synth::run(a),
        Command::Eval(a) => eval::run(a),
        Command::OracleCheck(a) => oracle::run(a),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_OTHER),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
