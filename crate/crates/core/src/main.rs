use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use triconf::experiment::{run, ExperimentConfig, Status, Subcommand};

/// Triangle configuration laboratory: measures, separation, configuration
/// histograms, incidence scaling and sphere-pair Fourier decay.
#[derive(Debug, Parser)]
#[command(name = "triconf", version)]
struct Cli {
    #[arg(value_enum)]
    subcommand: Subcommand,
    /// JSON experiment config; defaults are used for anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 means one per core.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = Some(out);
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global() {
            eprintln!("thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    match run(cfg, Some(cli.subcommand)) {
        Ok(report) => {
            for v in &report.verdicts {
                let tag = match v.status {
                    Status::Pass => "PASS",
                    Status::Fail => "FAIL",
                    Status::Flag => "FLAG",
                };
                println!(
                    "{tag} {}: value {} target {} tol {} ({})",
                    v.check, v.value, v.target, v.tolerance, v.detail
                );
            }
            println!(
                "config {} seed {} in {:.2}s",
                report.config_sha256, report.seed, report.wall_clock_s
            );
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
