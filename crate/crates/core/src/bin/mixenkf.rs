use clap::{Parser, Subcommand};
use mixenkf::cli::{self, ExperimentConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mixenkf", version, about = "Weighted ensemble Kalman filter experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Larger reference ensembles
    #[arg(long)]
    full_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the shared dataset
    Simulate(Common),
    /// Compute reference ensembles for every step
    Reference(Common),
    /// Run all schemes over the particle grid
    Sweep(Common),
    /// Plot and summarize runs.csv
    Report {
        #[command(flatten)]
        common: Common,
        /// Input CSV (defaults to <out>/runs.csv)
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the exact theory checks
    TheoryReport(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, String> {
    let path = common.config.as_deref().ok_or("--config is required for this command")?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| e.to_string())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(args: Args) -> Result<bool, String> {
    let e = |err: cli::CliError| err.to_string();
    match args.command {
        Command::Simulate(c) => {
            let m = cli::cmd_simulate(&load(&c)?, &c.out).map_err(e)?;
            println!("wrote {} (sha256 {})", c.out.join(&m.trajectory_file).display(), m.trajectory_sha256);
        }
        Command::Reference(c) => {
            let m = cli::cmd_reference(&load(&c)?, &c.out, c.full_scale).map_err(e)?;
            println!("wrote {} steps of {} with N_ref = {}", m.horizon, m.method, m.n_ref);
        }
        Command::Sweep(c) => {
            let s = cli::cmd_sweep(&load(&c)?, &c.out, c.full_scale).map_err(e)?;
            println!("wrote {} rows, {} failed runs", s.records.len(), s.failures.len());
            for f in &s.failures {
                eprintln!("failed: {} N={} rep={} t={}: {}", f.method, f.n, f.rep, f.t, f.error);
            }
        }
        Command::Report { common, csv } => {
            let input = csv.unwrap_or_else(|| common.out.join(cli::RUNS_FILE));
            for p in cli::cmd_report(&input, &common.out.join(cli::REPORT_DIR)).map_err(e)? {
                println!("wrote {}", p.display());
            }
        }
        Command::TheoryReport(c) => {
            let seed = match (&c.config, c.seed) {
                (_, Some(s)) => s,
                (Some(p), None) => ExperimentConfig::load(Path::new(p)).map_err(e)?.seed,
                (None, None) => 0,
            };
            let (text, ok) = cli::cmd_theory_report(&c.out, seed).map_err(e)?;
            print!("{text}");
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
