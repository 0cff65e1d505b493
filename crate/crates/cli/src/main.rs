//! `ncspoof` — command-line runner for the spoofing laboratory.
//!
//! Every subcommand resolves its configuration from built-in defaults for
//! the selected profile, then an optional JSON file (`--config`), then
//! command-line flags, validates it, and writes its artifacts together with
//! a `run.json` provenance record into `<out>/<subcommand>/`.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ncspoof::experiments::Profile;

#[derive(Parser, Debug)]
#[command(name = "ncspoof", version, about = "NC-OFDM physical-layer spoofing laboratory")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output root directory.
    #[arg(long, global = true, env = "NCSPOOF_OUT", default_value = "ncspoof-runs")]
    pub out: PathBuf,
    /// Size profile: `desk` or `paper`.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// JSON configuration file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset (manifest.json + data.f32le + labels).
    Gen(config::GenFlags),
    /// Cyclic autocorrelation of an interleaved NC-OFDM record.
    Caf(config::CafFlags),
    /// Train the supervised parameter-inference networks.
    TrainSupervised(config::SupervisedFlags),
    /// Train a VAE variant on a latent-structure experiment.
    TrainVae(config::VaeFlags),
    /// Unsupervised spectrum sensing on a signal/noise mixture.
    Sense(config::SenseFlags),
    /// Disentanglement metrics of a trained VAE.
    Metrics(config::MetricsFlags),
    /// Latent traversals and the latent-to-subcarrier map of a trained VAE.
    Traverse(config::TraverseFlags),
    /// Spoofing BER at the receiver for an adversary.
    SpoofEval(config::LinkFlags),
    /// Legitimate transmitter-to-receiver BER.
    RxEval(config::LinkFlags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Caf(_) => "caf",
            Command::TrainSupervised(_) => "train-supervised",
            Command::TrainVae(_) => "train-vae",
            Command::Sense(_) => "sense",
            Command::Metrics(_) => "metrics",
            Command::Traverse(_) => "traverse",
            Command::SpoofEval(_) => "spoof-eval",
            Command::RxEval(_) => "rx-eval",
        }
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or input files (exit 1).
    Validation(anyhow::Error),
    /// Anything that went wrong while running (exit 2).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn validation(e: impl Into<anyhow::Error>) -> Self {
        Failure::Validation(e.into())
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<ncspoof::Error> for Failure {
    fn from(e: ncspoof::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

pub fn profile_of(global: &GlobalArgs, file: Option<&serde_json::Value>) -> Result<Profile, Failure> {
    let from_file = file.and_then(|v| v.get("profile")).and_then(|p| p.as_str()).map(str::to_owned);
    match global.profile.clone().or(from_file) {
        Some(p) => p.parse().map_err(Failure::from),
        None => Ok(Profile::Desk),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run::dispatch(&cli) {
        Ok(dir) => {
            log::info!("artifacts written to {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
