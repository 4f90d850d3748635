use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hetfed::agg::ParamStore;
use hetfed::config::{ExperimentConfig, Strategy};
use hetfed::experiments::{compare, sweep};
use hetfed::orchestrator::{run_from, Simulation};
use hetfed::report;
use hetfed::Error;

/// Thread cap for the worker pool; defaults to all cores.
const THREADS_ENV: &str = "HETFED_THREADS";

#[derive(Parser)]
#[command(name = "hetfed", version, about = "Federated training under per-client memory and bandwidth budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, assignments and a summary.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides output_dir in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the final global model here.
        #[arg(long)]
        save_checkpoint: Option<PathBuf>,
        /// Start from this global model instead of a fresh one.
        #[arg(long)]
        load_checkpoint: Option<PathBuf>,
    },
    /// Search-only grid over epsilon and T_MAX.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        epsilon: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        tmax: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several strategies on identical selections and budgets.
    Compare {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let (mut cfg, notices) = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Config { .. } => Failure::Usage(format!("{}: {e}", path.display())),
        other => Failure::Usage(other.to_string()),
    })?;
    for n in notices {
        eprintln!("note: {n}");
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            save_checkpoint,
            load_checkpoint,
        } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(&cfg, out);
            let mut sim = Simulation::new(cfg.clone())?;
            if let Some(path) = load_checkpoint {
                let store = ParamStore::load(sim.space(), &path)?;
                sim.set_store(store)?;
            }
            let space = sim.space().clone();
            let output = run_from(sim)?;
            report::write_run(&dir, &cfg, &output)?;
            if let Some(path) = save_checkpoint {
                output.store.save(&space, &path)?;
            }
            println!(
                "{}: final accuracy {:.4} after {} rounds; wrote {}",
                output.summary.strategy,
                output.summary.final_accuracy,
                output.summary.rounds,
                dir.display()
            );
        }
        Command::Sweep {
            config,
            epsilon,
            tmax,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(&cfg, out);
            let rows = sweep(&cfg, &epsilon, &tmax)?;
            report::write_sweep(&dir, &rows)?;
            for r in &rows {
                println!(
                    "eps={} t_max={} mem_util={:.4} bw_util={:.4} hit_rate={:.5}",
                    r.epsilon, r.t_max, r.mem_util, r.bw_util, r.hit_rate
                );
            }
        }
        Command::Compare {
            config,
            strategies,
            seed,
            out,
        } => {
            let parsed = strategies
                .iter()
                .map(|s| s.parse::<Strategy>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::Usage)?;
            if parsed.len() < 2 {
                return Err(Failure::Usage("compare needs at least two strategies".into()));
            }
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(&cfg, out);
            let outputs = compare(&cfg, &parsed)?;
            report::write_compare(&dir, &cfg, &outputs)?;
            for o in &outputs {
                println!("{}: final accuracy {:.4}", o.summary.strategy, o.summary.final_accuracy);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(value) = std::env::var(THREADS_ENV) {
        match value.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not size thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{value}`");
                return ExitCode::from(2);
            }
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
