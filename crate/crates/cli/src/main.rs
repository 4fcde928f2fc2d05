//! `xmc`: synthetic data, training, attribution, evaluation and reports.

mod commands;
mod config;
mod manifest;
mod report;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmc_core::attribution::Method;
use xmc_core::training::Strategy;
use xmc_core::Error;

#[derive(Parser, Debug)]
#[command(name = "xmc", version, about = "Explainable multi-label text classification pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus with planted evidence.
    Synth(CommonArgs),
    /// Train one model per seed.
    Train(CommonArgs),
    /// Attribute every annotated (document, code) pair.
    Explain(CommonArgs),
    /// Plausibility, faithfulness and analysis metrics.
    Evaluate(CommonArgs),
    /// Static HTML highlights and summary tables.
    Report(CommonArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Attribution methods, comma-separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub method: Vec<String>,
    /// Checkpoint file, or a directory holding `model-seed{N}.xmc`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Attribution directory; defaults to `<out>/attributions`.
    #[arg(long)]
    pub attributions: Option<PathBuf>,
    /// Documents rendered by `report`.
    #[arg(long, default_value_t = 20)]
    pub docs: usize,
}

impl CommonArgs {
    /// Parsed built-in methods; `None` when none were requested.
    pub fn methods(&self) -> xmc_core::Result<Option<Vec<Method>>> {
        if self.method.is_empty() {
            return Ok(None);
        }
        self.method.iter().map(|m| m.parse()).collect::<xmc_core::Result<_>>().map(Some)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data { .. }
        | Error::TokenOutOfRange { .. }
        | Error::TooLong { .. }
        | Error::EvidenceOutOfRange { .. }
        | Error::Checkpoint { .. }
        | Error::Io(_)
        | Error::Json(_) => 3,
        _ => 4,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        3 => "data",
        _ => "numeric",
    }
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("XMC_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("XMC_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Explain(a) => commands::explain(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error code={code} kind={}: {msg}", kind(&e));
            ExitCode::from(code)
        }
    }
}
