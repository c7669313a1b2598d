//! `cimlite` command-line pipeline: synthetic data, pretraining, evaluation,
//! relevance maps and label-free phenotyping.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use cimlite::CimError;
use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::CommonFlags;

#[derive(Parser)]
#[command(name = "cimlite", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: CommonFlags,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (MPXD + JSON sidecar).
    GenData,
    /// Self-supervised pretraining of a backbone and projection head.
    Pretrain,
    /// Supervised training with a classifier head.
    TrainSup,
    /// Linear probe on frozen embeddings of `--weights`.
    LinearEval,
    /// Relevance maps of the test split (RLVM).
    Explain,
    /// Label-free phenotype assignment of the test split (CSV).
    Phenotype,
    /// Join evaluation reports into a comparison table.
    Report {
        /// `NAME=PATH` pairs of EvalReport JSON files.
        reports: Vec<String>,
    },
    /// Central-difference check of every differentiable operation.
    GradCheck,
}

fn exit_code(e: &CimError) -> u8 {
    match e {
        CimError::Io(_) => 2,
        CimError::Config(_) | CimError::Json(_) | CimError::Format(_) | CimError::Dimension(_) | CimError::Empty(_) => 3,
        CimError::NonFinite(_) => 4,
    }
}

fn kind(e: &CimError) -> &'static str {
    match e {
        CimError::Io(_) => "io",
        CimError::Config(_) => "config",
        CimError::Json(_) => "json",
        CimError::Format(_) => "format",
        CimError::Dimension(_) => "dimension",
        CimError::Empty(_) => "empty",
        CimError::NonFinite(_) => "numeric",
    }
}

fn configure_threads() -> cimlite::Result<()> {
    if let Ok(v) = std::env::var("CIMLITE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CimError::Config(format!("CIMLITE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CimError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> cimlite::Result<()> {
    configure_threads()?;
    let ctx = Ctx::new(cli.flags)?;
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Pretrain => commands::pretrain_cmd(&ctx),
        Command::TrainSup => commands::train_sup(&ctx),
        Command::LinearEval => commands::linear_eval_cmd(&ctx),
        Command::Explain => commands::explain_cmd(&ctx),
        Command::Phenotype => commands::phenotype_cmd(&ctx),
        Command::Report { reports } => commands::report_cmd(&ctx, &reports),
        Command::GradCheck => commands::grad_check_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": kind(&e),
                "code": exit_code(&e),
                "message": e.to_string().replace('\n', " "),
            });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
