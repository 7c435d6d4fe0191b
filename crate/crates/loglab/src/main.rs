use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use loglab::cli;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "loglab", version, about = "Thick-point simulation experiments for log-correlated Gaussian fields")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel replicas.
    #[arg(long, global = true, env = "LOGLAB_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Check a config file without running it.
    Validate { config: PathBuf },
    /// Print the experiment names.
    ListExperiments,
}

fn load(path: &PathBuf) -> Result<std::result::Result<cli::ExperimentConfig, Vec<String>>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(cli::validate(&bytes))
}

fn main() -> Result<ExitCode> {
    let args = Args::parse();
    if let Some(t) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("configuring threads")?;
    }
    match &args.command {
        Command::ListExperiments => {
            for name in cli::EXPERIMENTS {
                println!("{name}");
            }
        }
        Command::Validate { config } => match load(config)? {
            Ok(_) => println!("ok"),
            Err(errs) => {
                for e in errs {
                    eprintln!("{e}");
                }
                return Ok(ExitCode::FAILURE);
            }
        },
        Command::Run { config } => {
            let mut cfg = match load(config)? {
                Ok(c) => c,
                Err(errs) => {
                    for e in errs {
                        eprintln!("{e}");
                    }
                    return Ok(ExitCode::FAILURE);
                }
            };
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(o) = &args.out {
                cfg.output = o.clone();
            }
            let report = cli::run(&cfg)?;
            println!("{}", report.run_dir.join("report.json").display());
            match report.passed {
                Some(true) => println!("checks: pass"),
                Some(false) => println!("checks: FAIL"),
                None => {}
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
