use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use engsf_harness::config::parse_config;
use engsf_harness::plot::static_oracle_csv;
use engsf_harness::run::{parse_sweep_param, RunManifest, VERSION};
use engsf_harness::{
    emit_plot_data, emit_sweep_plot_data, run_experiment, run_sweep, static_oracle,
    ExperimentConfig, HarnessError,
};

#[derive(Parser)]
#[command(
    name = "engsf",
    about = "Ensemble Gaussian sum filter benchmark runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration for all of its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a configuration once per value of one key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`, e.g. `N=100,200,400`.
        #[arg(long)]
        param: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the exact grid posterior of a static problem as CSV.
    Oracle {
        /// Only `ex1` has a grid oracle.
        problem: String,
        #[arg(long, default_value_t = 10_000)]
        grid: usize,
        /// Config whose prior and likelihood settings are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate plot tables from a run manifest.
    Plot {
        #[arg(long)]
        manifest: PathBuf,
    },
    Version,
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| {
        HarnessError::Config(engsf_harness::ConfigError::Validation {
            field: "config".into(),
            message: format!("{}: {e}", path.display()),
        })
    })?;
    let mut cfg = parse_config(&text)?;
    if let Some(o) = out {
        cfg.output = o;
    }
    Ok(cfg)
}

fn report(manifest: &RunManifest) -> i32 {
    for s in &manifest.seeds {
        match (&s.error, s.time_averaged_rmse) {
            (Some(e), _) => eprintln!("seed {}: FAILED: {e}", s.seed),
            (None, Some(r)) => match s.mean_kl {
                Some(k) => println!("seed {}: rmse {r:.6} kl {k:.6}", s.seed),
                None => println!("seed {}: rmse {r:.6}", s.seed),
            },
            (None, None) => {}
        }
    }
    if let Some(r) = manifest.mean_rmse() {
        println!(
            "mean time-averaged rmse {r:.6} over {} seeds",
            manifest.seeds.len() - manifest.failed_seeds().count()
        );
    }
    if manifest.failed_seeds().any(|s| s.numerical_failure) {
        3
    } else if manifest.failed_seeds().next().is_some() {
        1
    } else {
        0
    }
}

fn execute(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config, out)?;
            let manifest = run_experiment(&cfg)?;
            let code = report(&manifest);
            if manifest.seeds.iter().any(|s| s.error.is_none()) {
                emit_plot_data(&manifest)?;
            }
            println!("wrote {}", cfg.output.display());
            Ok(code)
        }
        Command::Sweep { config, param, out } => {
            let cfg = load(&config, out)?;
            let (key, values) = parse_sweep_param(&param)?;
            let sweep = run_sweep(&cfg, &key, &values)?;
            emit_sweep_plot_data(&sweep)?;
            let mut code = 0;
            for e in &sweep.entries {
                match e.mean_rmse {
                    Some(r) => println!("{key}={}: mean rmse {r:.6}", e.value),
                    None => println!("{key}={}: no completed seeds", e.value),
                }
                if e.failed_seeds > 0 {
                    code = 3;
                }
            }
            println!("wrote {}", cfg.output.display());
            Ok(code)
        }
        Command::Oracle {
            problem,
            grid,
            config,
            out,
        } => {
            if problem != "ex1" {
                return Err(HarnessError::Config(
                    engsf_harness::ConfigError::Validation {
                        field: "problem".into(),
                        message: format!("no grid oracle for `{problem}`"),
                    },
                ));
            }
            let mut cfg = match config {
                Some(p) => load(&p, None)?,
                None => parse_config("experiment = ex1")?,
            };
            cfg.grid.points = grid;
            cfg.validate()?;
            let oracle = static_oracle(&cfg)?;
            let text = static_oracle_csv(&oracle);
            match out {
                Some(p) => fs::write(&p, text).map_err(|e| HarnessError::Io {
                    path: p.clone(),
                    source: e,
                })?,
                None => print!("{text}"),
            }
            Ok(0)
        }
        Command::Plot { manifest } => {
            let m = RunManifest::load(&manifest)?;
            for p in emit_plot_data(&m)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
        Command::Version => {
            println!("engsf {VERSION}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
