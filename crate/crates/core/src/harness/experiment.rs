//! Monte Carlo experiment runner and output writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation::{run_training, Algorithm, ParticipationSchedule, RunConfig, RunSeeds, RunTrace};
use crate::lossmodel::{generate_regression_dataset, least_squares_oracle, Dataset, LossModel, Weights};
use crate::metrics::{summarize, theorem_bound_check, McSummary};
use crate::rng::{derive_seed, stream};

/// Overrides applied on top of a loaded configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for Monte Carlo runs; `None` uses all cores.
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub master_seed: Option<u64>,
    /// Skip writing output files.
    pub dry_run: bool,
}

#[derive(Debug, Clone)]
pub struct AlgorithmReport {
    pub name: String,
    pub config: RunConfig,
    pub runs: Vec<RunTrace>,
    pub summary: McSummary,
}

impl AlgorithmReport {
    /// Monte Carlo mean of `(1/K) Σ_k ‖∇f(θ^k)‖²`.
    pub fn mean_grad_norm_sq(&self) -> f64 {
        let per_run = self.runs.iter().map(|r| {
            let g = r.pre_round_grad_norms();
            g.iter().sum::<f64>() / g.len().max(1) as f64
        });
        per_run.sum::<f64>() / self.runs.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dataset: Dataset,
    pub theta_star: Weights,
    pub f_star: f64,
    pub smoothness: f64,
    pub initial_cost: f64,
    pub schedule: ParticipationSchedule,
    pub algorithms: Vec<AlgorithmReport>,
    pub output_dir: PathBuf,
}

impl ExperimentReport {
    pub fn algorithm(&self, name: &str) -> Option<&AlgorithmReport> {
        self.algorithms.iter().find(|a| a.name == name)
    }
}

/// Dataset, optimum and smoothness constant of an experiment.
pub struct Problem {
    pub dataset: Dataset,
    pub theta_star: Weights,
    pub f_star: f64,
    pub smoothness: f64,
}

pub fn build_problem(config: &ExperimentConfig) -> Result<Problem> {
    let d = &config.data;
    let mut rng = stream(d.seed, "dataset", &[]);
    let (dataset, _) =
        generate_regression_dataset(d.n_agents, d.samples_per_agent, d.dimension, d.noise_std, &mut rng)?;
    let optimum = least_squares_oracle(&dataset)?;
    let smoothness = LossModel::Quadratic.smoothness_constant(&dataset);
    Ok(Problem {
        dataset,
        theta_star: optimum.theta,
        f_star: optimum.cost,
        smoothness,
    })
}

pub fn run_seeds(master: u64, algorithm: &str, run: usize) -> RunSeeds {
    RunSeeds {
        participation: derive_seed(master, "participation", &[run as u64]),
        sampling: derive_seed(master, &format!("local/{algorithm}"), &[run as u64]),
    }
}

/// Runs every configured algorithm for `config.runs` Monte Carlo runs on a
/// shared dataset and writes the result files.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentReport> {
    config.validate()?;
    let master = options.master_seed.unwrap_or(config.master_seed);
    let output_dir = options
        .output_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.clone());

    let problem = build_problem(config)?;
    let model = LossModel::Quadratic;
    let theta0 = config.theta0_weights()?;
    let initial_cost = model.global_cost(&problem.dataset, &theta0)?;
    let schedule = config.participation.resolve(config.data.n_agents);
    log::info!(
        "dataset ready: N={} L={} d={} f*={:.6e} smoothness={:.4}",
        config.data.n_agents,
        config.data.samples_per_agent,
        config.data.dimension,
        problem.f_star,
        problem.smoothness
    );

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot build worker pool: {e}")))?;

    let mut algorithms = Vec::with_capacity(config.algorithms.len());
    for (index, alg) in config.algorithms.iter().enumerate() {
        let algorithm = config.resolve_algorithm(index)?;
        let base = RunConfig {
            algorithm,
            rounds: config.rounds,
            schedule: schedule.clone(),
            theta0: theta0.clone(),
            seeds: run_seeds(master, &alg.name, 0),
        };
        log::info!("running `{}` for {} runs", alg.name, config.runs);
        let results: Vec<Result<RunTrace>> = pool.install(|| {
            (0..config.runs)
                .into_par_iter()
                .map(|run| {
                    let cfg = RunConfig {
                        seeds: run_seeds(master, &alg.name, run),
                        ..base.clone()
                    };
                    run_training(&cfg, &problem.dataset, model)
                })
                .collect()
        });
        let mut runs = Vec::with_capacity(results.len());
        for (run, result) in results.into_iter().enumerate() {
            runs.push(result.map_err(|source| Error::RunFailure {
                algorithm: alg.name.clone(),
                run,
                source: Box::new(source),
            })?);
        }
        let bound = match &base.algorithm {
            Algorithm::FedAvgSvrg(params) => Some(theorem_bound_check(
                &runs,
                problem.smoothness,
                initial_cost,
                problem.f_star,
                params,
                &schedule,
            )?),
            _ => None,
        };
        let summary = summarize(&runs, problem.f_star, bound)?;
        log::info!(
            "`{}` final mean cost error {:.6e}",
            alg.name,
            summary.final_mean_cost_error().unwrap_or(f64::NAN)
        );
        algorithms.push(AlgorithmReport {
            name: alg.name.clone(),
            config: base,
            runs,
            summary,
        });
    }

    let report = ExperimentReport {
        dataset: problem.dataset,
        theta_star: problem.theta_star,
        f_star: problem.f_star,
        smoothness: problem.smoothness,
        initial_cost,
        schedule,
        algorithms,
        output_dir,
    };
    if !options.dry_run {
        write_outputs(&report, config, master)?;
    }
    Ok(report)
}

/// CSV of per-run, per-round traces. Round `k` holds the state after the
/// update, `θ^{k+1}`.
pub fn trace_csv(report: &AlgorithmReport, f_star: f64) -> String {
    let mut out = String::from("run,round,cost,cost_error,grad_norm_sq,n_active\n");
    for (run, trace) in report.runs.iter().enumerate() {
        for r in &trace.rounds {
            writeln!(
                out,
                "{run},{},{:.16e},{:.16e},{:.16e},{}",
                r.round,
                r.cost,
                r.cost - f_star,
                r.grad_norm_sq,
                r.n_active()
            )
            .expect("writing to a String cannot fail");
        }
    }
    out
}

#[derive(Serialize)]
struct AlgorithmSummaryJson<'a> {
    kind: &'a Algorithm,
    final_mean_cost_error: Option<f64>,
    final_variance: Option<f64>,
    cep_radius: f64,
    cep_radius_2d: f64,
    mean_grad_norm_sq: f64,
    bound_lhs: Option<f64>,
    bound_rhs: Option<f64>,
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    f_star: f64,
    theta_star: &'a Weights,
    smoothness: f64,
    initial_cost: f64,
    algorithms: BTreeMap<&'a str, AlgorithmSummaryJson<'a>>,
}

#[derive(Serialize)]
struct ResolvedJson<'a> {
    master_seed: u64,
    runs: usize,
    rounds: usize,
    output_dir: &'a Path,
    data: &'a super::config::DataConfig,
    participation: &'a ParticipationSchedule,
    algorithms: BTreeMap<&'a str, &'a RunConfig>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_outputs(report: &ExperimentReport, config: &ExperimentConfig, master: u64) -> Result<()> {
    let dir = &report.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    for alg in &report.algorithms {
        write_file(&dir.join(format!("trace_{}.csv", alg.name)), &trace_csv(alg, report.f_star))?;
    }

    let summary = SummaryJson {
        f_star: report.f_star,
        theta_star: &report.theta_star,
        smoothness: report.smoothness,
        initial_cost: report.initial_cost,
        algorithms: report
            .algorithms
            .iter()
            .map(|a| {
                let s = &a.summary;
                (
                    a.name.as_str(),
                    AlgorithmSummaryJson {
                        kind: &a.config.algorithm,
                        final_mean_cost_error: s.final_mean_cost_error(),
                        final_variance: s.final_variance(),
                        cep_radius: s.cep_radius,
                        cep_radius_2d: s.cep_radius_2d,
                        mean_grad_norm_sq: a.mean_grad_norm_sq(),
                        bound_lhs: s.bound.as_ref().map(|b| b.lhs),
                        bound_rhs: s.bound.as_ref().map(|b| b.rhs),
                    },
                )
            })
            .collect(),
    };
    write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;

    let bounds: BTreeMap<&str, _> = report
        .algorithms
        .iter()
        .filter_map(|a| a.summary.bound.as_ref().map(|b| (a.name.as_str(), b)))
        .collect();
    write_file(&dir.join("bound_report.json"), &serde_json::to_string_pretty(&bounds)?)?;

    let resolved = ResolvedJson {
        master_seed: master,
        runs: config.runs,
        rounds: config.rounds,
        output_dir: dir,
        data: &config.data,
        participation: &report.schedule,
        algorithms: report
            .algorithms
            .iter()
            .map(|a| (a.name.as_str(), &a.config))
            .collect(),
    };
    write_file(&dir.join("config_resolved.json"), &serde_json::to_string_pretty(&resolved)?)?;
    log::info!("wrote results to {}", dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config;

    fn tiny(runs: usize) -> ExperimentConfig {
        let text = format!(
            r#"
runs = {runs}
rounds = 4
theta0 = 0.0

[data]
n_agents = 3
samples_per_agent = 6
dimension = 2
noise_std = 0.5
seed = 5

[participation]
kind = "per_agent"
probabilities = [1.0, 0.5, 0.8]

[[algorithms]]
name = "svrg"
kind = "fedavg_svrg"
stepsize = 0.05
snapshots = 2
inner_steps = 2

[[algorithms]]
name = "batch"
kind = "fedavg_uniform_batch"
stepsize = 0.05
batch_size = 2
"#
        );
        parse_config(&text, Path::new("tiny.toml")).unwrap()
    }

    #[test]
    fn report_shapes_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            workers: Some(2),
            output_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let report = run_experiment(&tiny(3), &opts).unwrap();
        assert_eq!(report.algorithms.len(), 2);
        assert!(report.algorithm("svrg").unwrap().summary.bound.is_some());
        assert!(report.algorithm("batch").unwrap().summary.bound.is_none());
        for a in &report.algorithms {
            assert_eq!(a.runs.len(), 3);
            assert_eq!(a.summary.mean_cost_error.len(), 4);
        }
        for f in ["trace_svrg.csv", "trace_batch.csv", "summary.json", "bound_report.json", "config_resolved.json"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let csv = fs::read_to_string(dir.path().join("trace_svrg.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * 4);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert!(json["algorithms"]["svrg"]["bound_rhs"].is_number());
        assert!(json["algorithms"]["batch"]["bound_rhs"].is_null());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = tiny(4);
        let run = |w| {
            run_experiment(
                &cfg,
                &RunOptions {
                    workers: Some(w),
                    dry_run: true,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let (a, b) = (run(1), run(3));
        for (x, y) in a.algorithms.iter().zip(&b.algorithms) {
            assert_eq!(trace_csv(x, a.f_star), trace_csv(y, b.f_star));
        }
    }

    #[test]
    fn master_seed_override_changes_runs() {
        let cfg = tiny(2);
        let go = |seed| {
            run_experiment(
                &cfg,
                &RunOptions {
                    master_seed: Some(seed),
                    dry_run: true,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let (a, b) = (go(1), go(2));
        assert_eq!(a.f_star, b.f_star);
        assert_ne!(trace_csv(&a.algorithms[0], a.f_star), trace_csv(&b.algorithms[0], b.f_star));
    }

    #[test]
    fn divergent_run_is_reported_with_its_index() {
        let mut cfg = tiny(2);
        cfg.algorithms[0].stepsize = 1e200;
        let err = run_experiment(&cfg, &RunOptions { dry_run: true, ..Default::default() }).unwrap_err();
        match err {
            Error::RunFailure { algorithm, run, .. } => {
                assert_eq!(algorithm, "svrg");
                assert_eq!(run, 0);
            }
            other => panic!("{other:?}"),
        }
    }
}
