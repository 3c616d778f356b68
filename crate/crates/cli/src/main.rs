use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ileqg_cli::config::{self, ExperimentConfig};
use ileqg_cli::{commands, validate, CliError, EXIT_EARLY_STOP, EXIT_FAILURE, EXIT_OK, THREADS_ENV};

#[derive(Parser)]
#[command(name = "ileqg", version, about = "Risk-sensitive trajectory optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file (fields not listed come from the preset)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// pendulum-fig4, pendulum-robust, arm-conv or arm-robust
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run RegILEQG and/or ILEQG and write per-iteration traces
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Surrogate vs Monte-Carlo value and gradient along iterates
    ApproxCompare {
        #[command(flatten)]
        common: Common,
        /// Iterates written by `solve` (default: run RegILEQG first)
        #[arg(long)]
        iterates: Option<PathBuf>,
    },
    /// Test cost of risk-neutral and risk-sensitive controllers under kicks
    Robustness {
        #[command(flatten)]
        common: Common,
    },
    /// Cross-check the solvers against reference implementations
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Print the resolved configuration
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = config::load(common.config.as_deref(), common.preset.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(common: &Common) -> Result<(), CliError> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn early(stopped: bool) -> i32 {
    if stopped { EXIT_EARLY_STOP } else { EXIT_OK }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Solve { common } => {
            let cfg = resolve(&common)?;
            init_threads(&common)?;
            let out = commands::solve(&cfg)?;
            for r in &out.summary.runs {
                println!(
                    "{:?}: {:?} after {} iterations, best surrogate {}",
                    r.algorithm,
                    r.status,
                    r.iterations,
                    r.best_surrogate.map_or("undefined".into(), |v| format!("{v:.6e}"))
                );
                if let Some(e) = &r.error {
                    eprintln!("  {e}");
                }
            }
            println!("summary: {}", out.summary_path.display());
            Ok(early(out.early_stop()))
        }
        Command::ApproxCompare { common, iterates } => {
            let cfg = resolve(&common)?;
            init_threads(&common)?;
            let out = commands::approx_compare(&cfg, iterates.as_deref())?;
            println!("{}", out.csv_path.display());
            Ok(early(out.early_stop))
        }
        Command::Robustness { common } => {
            let cfg = resolve(&common)?;
            init_threads(&common)?;
            let out = commands::robustness(&cfg)?;
            for c in &out.controllers {
                println!("theta {}: {:?}, tuned step {:?}", c.theta, c.status, c.tuned_step);
            }
            println!("{}", out.csv_path.display());
            Ok(early(out.early_stop()))
        }
        Command::Validate { common } => {
            let seed = match &common.config {
                Some(_) => resolve(&common)?.seed,
                None => common.seed.unwrap_or(0),
            };
            init_threads(&common)?;
            let report = validate::run(seed, &validate::Hooks::default());
            println!("{report}");
            Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::ShowConfig { common } => {
            print!("{}", resolve(&common)?.to_toml());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let code = match Cli::try_parse() {
        Ok(cli) => execute(cli).unwrap_or_else(|e| {
            eprintln!("error: {e}");
            e.exit_code()
        }),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() { ileqg_cli::EXIT_CONFIG } else { EXIT_OK }
        }
    };
    ExitCode::from(code as u8)
}
