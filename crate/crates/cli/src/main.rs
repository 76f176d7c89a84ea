use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use projres_cli::runner::{self, Overrides};
use projres_cli::{CliError, CliResult, ExperimentConfig};
use projres_core::Execution;

/// Federated fine-tuning simulator and membership inference audit.
///
/// Thread count: set PROJRES_THREADS to size the worker pool.
/// Precedence: command-line flags > config file > built-in defaults.
#[derive(Parser)]
#[command(name = "projres", version)]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Default)]
struct OverrideArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rounds to attack, comma separated.
    #[arg(long, value_delimiter = ',')]
    rounds: Option<Vec<usize>>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Evaluation (candidate sampling) seed.
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Federation (partition and batch sampling) seed.
    #[arg(long)]
    seed: Option<u64>,
    /// ProjRes decision threshold.
    #[arg(long)]
    tau: Option<f64>,
}

impl OverrideArgs {
    fn into_overrides(self) -> Overrides {
        Overrides {
            output_dir: self.out,
            rounds: self.rounds,
            repetitions: self.repetitions,
            eval_seed: self.eval_seed,
            federation_seed: self.seed,
            tau: self.tau,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, attack and write results.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Scan batch token counts p and report where exact recovery stops.
    ScanBoundary {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        m: usize,
        /// Inclusive range START..END.
        #[arg(long, default_value = "1..64", conflicts_with = "p_list")]
        p_range: String,
        /// Explicit p values, comma separated.
        #[arg(long, value_delimiter = ',')]
        p_list: Option<Vec<usize>>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "boundary.csv")]
        out: PathBuf,
    },
    /// Train and dump the traces (globals, uploads, batches).
    ExportTrace {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Attack a previously exported trace.
    Attack {
        trace_dir: PathBuf,
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

fn parse_range(s: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Config(format!("invalid p range {s:?}; expected START..END"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || a > b {
        return Err(CliError::Config(format!("p range {s:?} is empty")));
    }
    Ok((a..=b).collect())
}

fn load(path: &std::path::Path, overrides: OverrideArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.into_overrides().apply(&mut cfg)?;
    Ok(cfg)
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("PROJRES_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Config(format!("PROJRES_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("PROJRES_THREADS: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Run { config, overrides } => {
            runner::run_experiment(&load(&config, overrides)?, exec)?;
        }
        Command::ScanBoundary {
            n,
            m,
            p_range,
            p_list,
            trials,
            seed,
            out,
        } => {
            let ps = match p_list {
                Some(list) => list,
                None => parse_range(&p_range)?,
            };
            let p_max = runner::scan_boundary(n, m, &ps, trials, seed, &out, exec)?;
            match p_max {
                Some(p) => println!("p_max = {p}"),
                None => println!("p_max = none"),
            }
            println!("theory min(n-1, m) = {}", projres_core::theory::p_max(n, m));
        }
        Command::ExportTrace { config, overrides } => {
            runner::export_traces(&load(&config, overrides)?, exec)?;
        }
        Command::Attack {
            trace_dir,
            config,
            overrides,
        } => {
            runner::attack_trace(&trace_dir, &load(&config, overrides)?, exec)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
