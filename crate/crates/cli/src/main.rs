use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use prevmap_cli::{run, Command, Overrides, RunConfig};

/// Fit, predict, simulate, cross-validate and benchmark prevalence models.
#[derive(Debug, Parser)]
#[command(name = "prevmap", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let bytes = match std::fs::read(&args.config) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: reading {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let base = args.config.parent().map(PathBuf::from).unwrap_or_default();
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        threads: args.threads,
    };
    let resolved = std::str::from_utf8(&bytes)
        .map_err(|e| prevmap_cli::ConfigErrors(vec![format!("config: {e}")]))
        .and_then(RunConfig::from_json)
        .and_then(|c| c.resolve(args.command, &base, &overrides));
    let cfg = match resolved {
        Ok(c) => c,
        Err(e) => {
            eprint!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg, &bytes) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
