use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::harness::{build_problem, load_config, run_experiment, RunOptions};

/// Federated learning simulator with probabilistic client participation.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every algorithm of an experiment and write results.
    Run {
        config: PathBuf,
        /// Worker threads for Monte Carlo runs (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        master_seed: Option<u64>,
    },
    /// Parse and validate a configuration without running it.
    Validate { config: PathBuf },
    /// Print the least-squares optimum and smoothness constant of the dataset.
    Oracle { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSIM_LOG", "info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> fedsim::Result<()> {
    match command {
        Command::Run {
            config,
            workers,
            output_dir,
            master_seed,
        } => {
            let cfg = load_config(&config)?;
            let report = run_experiment(
                &cfg,
                &RunOptions {
                    workers,
                    output_dir,
                    master_seed,
                    dry_run: false,
                },
            )?;
            println!("f_star = {:.10e}", report.f_star);
            for a in &report.algorithms {
                let s = &a.summary;
                println!(
                    "{:<24} final_cost_error = {:.6e}  final_variance = {}  cep = {:.6}",
                    a.name,
                    s.final_mean_cost_error().unwrap_or(f64::NAN),
                    s.final_variance().map_or("n/a".into(), |v| format!("{v:.6e}")),
                    s.cep_radius
                );
            }
            println!("results in {}", report.output_dir.display());
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            println!(
                "{}: ok ({} algorithms, {} runs, {} rounds)",
                config.display(),
                cfg.algorithms.len(),
                cfg.runs,
                cfg.rounds
            );
        }
        Command::Oracle { config } => {
            let cfg = load_config(&config)?;
            let p = build_problem(&cfg)?;
            println!("f_star = {:.16e}", p.f_star);
            println!("smoothness = {:.16e}", p.smoothness);
            let theta: Vec<String> = p.theta_star.as_slice().iter().map(|x| format!("{x:.16e}")).collect();
            println!("theta_star = [{}]", theta.join(", "));
        }
    }
    Ok(())
}
