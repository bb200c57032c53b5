//! Batch front end of the Koopman-van Hove laboratory.
//!
//! `run` propagates a configured scenario and writes `series.csv`,
//! `summary.json` and state snapshots. `check` does the same with every
//! applicable named check when the config lists none. `oracle` evaluates
//! the characteristics solution on a file of points.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 a check
//! failed, 3 numerical abort.

pub mod checks;
pub mod config;
pub mod run;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{prepare, Prepared};
use crate::run::{run_oracle, run_scenario, Failure, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_OK};

pub const DEFAULT_OUT_DIR: &str = "kvh-lab-out";

#[derive(Debug, Parser)]
#[command(name = "kvh-lab", version, about = "Koopman-van Hove phase-space laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Propagate the scenario and evaluate the configured checks.
    Run(Common),
    /// Propagate and evaluate every applicable check (or the listed ones).
    Check(Common),
    /// Evaluate the characteristics solution at the points of a CSV file.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// CSV with a header row and columns z1..z2n.
        #[arg(long)]
        points: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` of the config.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Overrides the sampler seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, 0 = all cores. Results do not depend on it.
    #[arg(long, env = "KVH_LAB_THREADS", default_value_t = 0)]
    pub threads: usize,
}

fn load(common: &Common, all_checks: bool) -> Result<Prepared, Failure> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let config = config::parse(&text).map_err(|e| Failure::Config(e.to_string()))?;
    prepare(config, all_checks).map_err(|e| Failure::Config(e.to_string()))
}

fn out_dir(common: &Common, p: &Prepared) -> PathBuf {
    common
        .out_dir
        .clone()
        .or_else(|| p.config.output_dir.clone())
        .unwrap_or_else(|| Path::new(DEFAULT_OUT_DIR).to_path_buf())
}

fn dispatch(command: &Command) -> Result<i32, Failure> {
    match command {
        Command::Run(common) | Command::Check(common) => {
            let is_check = matches!(command, Command::Check(_));
            let p = load(common, is_check)?;
            let out = out_dir(common, &p);
            let summary = run_scenario(if is_check { "check" } else { "run" }, &p, common.seed, &out)?;
            for c in &summary.checks {
                eprintln!(
                    "{} {}: value {:.6e}, tolerance {:.3e}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
            }
            Ok(if summary.all_pass { EXIT_OK } else { EXIT_CHECK_FAILED })
        }
        Command::Oracle { common, points } => {
            let p = load(common, false)?;
            let out = out_dir(common, &p);
            let (path, aborted) = run_oracle(&p, points, &out)?;
            eprintln!("wrote {}; {aborted} points aborted in the singular region", path.display());
            Ok(EXIT_OK)
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let threads = match &cli.command {
        Command::Run(c) | Command::Check(c) | Command::Oracle { common: c, .. } => c.threads,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("cannot start {threads} worker threads: {e}");
            return EXIT_CONFIG;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.message());
            f.exit_code()
        }
    }
}
