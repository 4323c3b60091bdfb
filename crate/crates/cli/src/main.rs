//! `fpi <subcommand> --config <path> [--out <dir>] [--seed <u64>]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use fpi_core::driver::{run_experiment, Subcommand};
use fpi_core::io::parse_config;
use fpi_core::FpiError;

#[derive(Debug, Parser)]
#[command(name = "fpi", version, about = "Fluid-plate interaction simulator and stability analyzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, ClapSubcommand)]
enum Command {
    /// Run the configured trajectory and write the energy ledger.
    Simulate(Common),
    /// Assemble the linear generator and report its spectrum.
    Spectrum(Common),
    /// Check the absorbing set on a random ensemble.
    Absorb(Common),
    /// Check the stabilizability estimate on random pairs.
    Stabilize(Common),
    /// Heuristic correlation dimension and regularity of the attractor.
    Dimension(Common),
    /// Run the certification suite.
    Certify(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "fpi_output")]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn split(self) -> (Subcommand, Common) {
        match self {
            Command::Simulate(c) => (Subcommand::Simulate, c),
            Command::Spectrum(c) => (Subcommand::Spectrum, c),
            Command::Absorb(c) => (Subcommand::Absorb, c),
            Command::Stabilize(c) => (Subcommand::Stabilize, c),
            Command::Dimension(c) => (Subcommand::Dimension, c),
            Command::Certify(c) => (Subcommand::Certify, c),
        }
    }
}

fn fail(sub: Option<Subcommand>, err: &FpiError) -> ExitCode {
    let report = serde_json::json!({
        "subcommand": sub.map(|s| s.as_str()),
        "error": err.to_string(),
        "exit_code": err.exit_code(),
    });
    eprintln!("{report}");
    ExitCode::from(err.exit_code() as u8)
}

fn configure_threads() -> Result<(), FpiError> {
    let Ok(raw) = std::env::var("FPI_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| FpiError::validation("FPI_THREADS", format!("expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FpiError::validation("FPI_THREADS", e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (sub, args) = cli.command.split();
    if let Err(e) = configure_threads() {
        return fail(Some(sub), &e);
    }
    let mut cfg = match parse_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(Some(sub), &e),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    match run_experiment(sub, &cfg, &args.out) {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            println!("outputs and manifest written to {}", args.out.display());
            if outcome.exit_code != 0 {
                let report = serde_json::json!({
                    "subcommand": sub.as_str(),
                    "status": outcome.manifest.status,
                    "exit_code": outcome.exit_code,
                });
                eprintln!("{report}");
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => fail(Some(sub), &e),
    }
}
