use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unfold_cli::commands::{self, Outcome};
use unfold_cli::config::{ConfigError, FileConfig};

/// Numerical toolkit for stochastic unfolding on lattice spring networks:
/// operator verification, Korn sweeps, cell problems, homogenization
/// studies, and rate-independent evolutions.
#[derive(Parser)]
#[command(name = "unfold", version, about, max_term_width = 100)]
struct Cli {
    /// TOML run configuration; one file fully determines a run.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory for reports, tables, and trajectories.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override the seed from the configuration file.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Size of the worker thread pool (default: all cores). Outputs do not
    /// depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized operator-identity suite and a Korn sweep.
    Verify,
    /// Sweep windowed Korn constants for a generating set.
    Korn,
    /// Assemble the homogenized tensor and cross-check it against cell
    /// problems at random probes.
    Corrector,
    /// Static homogenization study: ε-sweep against the limit energy.
    Static,
    /// Rate-independent evolution: ε-sweep against the limit system, or a
    /// single trajectory with energy balance and Lipschitz reports.
    Evolve,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Ignore the error from configuring twice (tests call in-process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(Outcome { passed: true, summary }) => {
            println!("ok: {summary}");
            ExitCode::SUCCESS
        }
        Ok(Outcome { passed: false, summary }) => {
            println!("FAILED: {summary}");
            ExitCode::FAILURE
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<ConfigError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError("--config PATH is required".into()))?;
    let cfg = FileConfig::from_path(path)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    match cli.command {
        Command::Verify => commands::cmd_verify(&cfg, &cli.out, seed),
        Command::Korn => commands::cmd_korn(&cfg, &cli.out, seed),
        Command::Corrector => commands::cmd_corrector(&cfg, &cli.out, seed),
        Command::Static => commands::cmd_static(&cfg, &cli.out, seed),
        Command::Evolve => commands::cmd_evolve(&cfg, &cli.out, seed),
    }
}
