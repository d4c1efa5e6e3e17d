//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fedsim::federation::aggregate;
use fedsim::harness::{load_config, run_experiment, ExperimentConfig, ExperimentReport, RunOptions};
use fedsim::localsolver::variance_reduced_grad;
use fedsim::lossmodel::{generate_regression_dataset, AgentShard, Dataset, LossModel};
use fedsim::rng::stream;
use fedsim::Weights;
use rand::Rng;

const SVRG: &str = "fedavg_svrg";
const PROB_SGD: &str = "fedavg_prob_sgd";
const UNIFORM: &str = "fedavg_uniform_batch";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport, String> {
    run_experiment(
        cfg,
        &RunOptions {
            dry_run: true,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    o.detail = format!("{} ({:.3}s)", o.detail, elapsed.as_secs_f64());
    if let Some(limit) = limit {
        if elapsed > limit {
            o.pass = false;
            o.detail = format!("{}; exceeded {:.0}s budget", o.detail, limit.as_secs_f64());
        }
    }
    o
}

fn max_abs_diff(a: &Weights, b: &Weights) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let (ds, _) = generate_regression_dataset(1, 50, 10, 1.0, &mut stream(101, "dataset", &[])).unwrap();
    let shard = ds.shard(0);
    let model = LossModel::Quadratic;
    let mut rng = stream(101, "pairs", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut point = || Weights::new((0..10).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let (w, w_tilde) = (point(), point());
        let mu = model.agent_full_grad(shard, &w_tilde).unwrap();
        let mut mean = Weights::zeros(10);
        for i in 0..shard.len() {
            mean.axpy(1.0, &variance_reduced_grad(model, shard, &w, &w_tilde, &mu, i).unwrap());
        }
        mean.scale(1.0 / shard.len() as f64);
        worst = worst.max(max_abs_diff(&mean, &model.agent_full_grad(shard, &w).unwrap()));
    }
    outcome(
        worst <= 1e-12,
        format!("max |mean_i v_i - full grad| = {worst:.3e} over 20 pairs (tol 1e-12)"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = stream(202, "aggregation", &[]);
    let mut worst: f64 = 0.0;
    for n in 2..=8usize {
        let d = 3;
        let theta = Weights::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let probs: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
        let deltas: Vec<Weights> = (0..n)
            .map(|_| Weights::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let mut expected = Weights::zeros(d);
        for pattern in 0u32..(1 << n) {
            let ind: Vec<bool> = (0..n).map(|i| pattern >> i & 1 == 1).collect();
            let weight: f64 = (0..n)
                .map(|i| if ind[i] { probs[i] } else { 1.0 - probs[i] })
                .product();
            let masked: Vec<Option<Weights>> = (0..n)
                .map(|i| ind[i].then(|| deltas[i].clone()))
                .collect();
            expected.axpy(weight, &aggregate(&theta, &masked, &ind, &probs).unwrap());
        }
        let mut target = theta.clone();
        for delta in &deltas {
            target.axpy(1.0 / n as f64, delta);
        }
        worst = worst.max(max_abs_diff(&expected, &target));
    }
    outcome(
        worst <= 1e-12,
        format!("max |E[aggregate] - (theta + mean delta)| = {worst:.3e} for N = 2..8 (tol 1e-12)"),
    )
}

fn criterion_3(case1: &ExperimentReport) -> Outcome {
    let b = case1.algorithm(SVRG).unwrap().summary.bound.as_ref().unwrap();
    outcome(
        b.lhs <= b.rhs,
        format!(
            "lhs = {:.6e} <= rhs = {:.6e} (optimality {:.3e}, drift {:.3e}, variance {:.3e}, imputed cells {})",
            b.lhs, b.rhs, b.optimality_term, b.drift_term, b.variance_term, b.imputed_cells
        ),
    )
}

fn criterion_4(cfg: &ExperimentConfig, case1: &ExperimentReport) -> Outcome {
    let mut short = cfg.clone();
    short.rounds = 50;
    short.algorithms.retain(|a| a.name == SVRG);
    let short = match run(&short) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("K = 50 run failed: {e}")),
    };
    let isolated = |r: &ExperimentReport| {
        let b = r.algorithm(SVRG).unwrap().summary.bound.clone().unwrap();
        b.rhs - b.drift_term - b.variance_term
    };
    let ratio = isolated(&short) / isolated(case1);
    let svrg = case1.algorithm(SVRG).unwrap().mean_grad_norm_sq();
    let sgd = case1.algorithm(PROB_SGD).unwrap().mean_grad_norm_sq();
    outcome(
        (ratio - 2.0).abs() <= 1e-9 && 2.0 * svrg <= sgd,
        format!(
            "first-term ratio K=50/K=100 = {ratio:.12} (2 ± 1e-9); mean grad norm² SVRG {svrg:.4e} vs SGD {sgd:.4e} (factor {:.2}, need >= 2)",
            sgd / svrg
        ),
    )
}

fn criterion_5(case1: &ExperimentReport) -> Outcome {
    let svrg = case1.algorithm(SVRG).unwrap().summary.tail_variance(20).unwrap();
    let sgd = case1.algorithm(PROB_SGD).unwrap().summary.tail_variance(20).unwrap();
    let ratio = svrg / sgd;
    outcome(
        svrg < sgd && ratio <= 0.25,
        format!("last-20 variance SVRG {svrg:.4e} vs SGD {sgd:.4e}, ratio {ratio:.3e} (<= 0.25)"),
    )
}

fn criterion_6(case1: &ExperimentReport, case2: Result<&ExperimentReport, &String>) -> Outcome {
    let ratio = |r: &ExperimentReport| {
        let s = r.algorithm(SVRG).unwrap().summary.cep_radius;
        let b = r.algorithm(PROB_SGD).unwrap().summary.cep_radius;
        (s, b, s / b)
    };
    let (s1, b1, r1) = ratio(case1);
    let case2 = match case2 {
        Ok(r) => r,
        Err(e) => {
            return outcome(
                false,
                format!("case 1 CEP {s1:.4} vs {b1:.4} (ratio {r1:.3e}); case 2 failed: {e}"),
            )
        }
    };
    let (s2, b2, r2) = ratio(case2);
    outcome(
        s1 < b1 && s2 < b2 && r1 <= 0.25 && r2 <= 0.25,
        format!(
            "case 1 CEP SVRG {s1:.4} vs SGD {b1:.4} (ratio {r1:.3e}); case 2 SVRG {s2:.4} vs SGD {b2:.4e} (ratio {r2:.3e}); need <= 0.25"
        ),
    )
}

fn criterion_7(case1: &ExperimentReport) -> Outcome {
    let err = case1.algorithm(SVRG).unwrap().summary.final_mean_cost_error().unwrap();
    let rel = err / case1.f_star;
    outcome(
        rel <= 0.01,
        format!(
            "final mean cost error {err:.4e} = {:.3}% of f* = {:.6} (<= 1%)",
            100.0 * rel,
            case1.f_star
        ),
    )
}

fn criterion_8(case1: &ExperimentReport) -> Outcome {
    let (svrg, uni) = (
        &case1.algorithm(SVRG).unwrap().summary,
        &case1.algorithm(UNIFORM).unwrap().summary,
    );
    let (es, eu) = (svrg.final_mean_cost_error().unwrap(), uni.final_mean_cost_error().unwrap());
    let (vs, vu) = (svrg.tail_variance(20).unwrap(), uni.tail_variance(20).unwrap());
    outcome(
        es <= eu && vs < vu,
        format!("final error SVRG {es:.4e} vs uniform batch {eu:.4e}; last-20 variance {vs:.4e} vs {vu:.4e}"),
    )
}

fn cli_run(config: &Path, out: &Path, workers: &str) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .arg("run")
        .arg(config)
        .args(["--workers", workers, "--output-dir"])
        .arg(out)
        .env("FEDSIM_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = config_path("case1.toml");
    let outs: Vec<(PathBuf, &str)> = vec![
        (dir.path().join("w8_a"), "8"),
        (dir.path().join("w8_b"), "8"),
        (dir.path().join("w1"), "1"),
    ];
    for (out, workers) in &outs {
        if let Err(e) = cli_run(&config, out, workers) {
            return outcome(false, format!("run failed: {e}"));
        }
    }
    let mut compared = 0;
    let mut mismatches = Vec::new();
    let mut names: Vec<_> = fs::read_dir(&outs[0].0)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    for name in &names {
        let reference = fs::read(outs[0].0.join(name)).unwrap();
        for (out, _) in &outs[1..] {
            compared += 1;
            if fs::read(out.join(name)).ok().as_ref() != Some(&reference) {
                mismatches.push(format!("{}/{name}", out.file_name().unwrap().to_string_lossy()));
            }
        }
    }
    outcome(
        mismatches.is_empty() && !names.is_empty(),
        format!(
            "{compared} CSV comparisons across two 8-worker runs and one 1-worker run, mismatches: {mismatches:?}"
        ),
    )
}

fn fd_worst(model: LossModel, seed: u64) -> f64 {
    let mut rng = stream(seed, "acceptance-fd", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let shards = (0..rng.random_range(1..=4))
            .map(|_| {
                let len = rng.random_range(1..=10);
                let rows = (0..len)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
                    .collect();
                let labels = (0..len)
                    .map(|_| match model {
                        LossModel::Quadratic => rng.random_range(-3.0..3.0),
                        LossModel::Logistic => {
                            if rng.random::<bool>() {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                    })
                    .collect();
                AgentShard::new(rows, labels).unwrap()
            })
            .collect();
        let ds = Dataset::new(shards).unwrap();
        let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let analytic = model.global_grad(&ds, &Weights::new(theta.clone()).unwrap()).unwrap();
        let numeric: Vec<f64> = (0..d)
            .map(|j| {
                let (mut up, mut down) = (theta.clone(), theta.clone());
                up[j] += 1e-6;
                down[j] -= 1e-6;
                let fu = model.global_cost(&ds, &Weights::new(up).unwrap()).unwrap();
                let fd = model.global_cost(&ds, &Weights::new(down).unwrap()).unwrap();
                (fu - fd) / 2e-6
            })
            .collect();
        let err = Weights::new(numeric).unwrap().distance(&analytic);
        worst = worst.max(err / analytic.norm().max(1.0));
    }
    worst
}

fn criterion_10() -> Outcome {
    let q = fd_worst(LossModel::Quadratic, 10);
    let l = fd_worst(LossModel::Logistic, 11);
    outcome(
        q <= 1e-5 && l <= 1e-5,
        format!("worst relative error quadratic {q:.3e}, logistic {l:.3e} over 100 probes each (tol 1e-5)"),
    )
}

fn main() -> ExitCode {
    let cfg1 = load_config(config_path("case1.toml")).expect("case 1 config");
    let cfg2 = load_config(config_path("case2.toml")).expect("case 2 config");

    let start = Instant::now();
    let case1 = run(&cfg1);
    let case1_time = start.elapsed();
    let case2 = run(&cfg2);

    let mut results: Vec<(u32, Outcome)> = vec![
        (1, timed(Some(Duration::from_secs(1)), criterion_1)),
        (2, timed(Some(Duration::from_secs(1)), criterion_2)),
    ];
    match &case1 {
        Ok(case1) => {
            let mut c3 = criterion_3(case1);
            c3.detail = format!("{} (experiment {:.3}s)", c3.detail, case1_time.as_secs_f64());
            c3.pass &= case1_time <= Duration::from_secs(120);
            results.push((3, c3));
            results.push((4, timed(None, || criterion_4(&cfg1, case1))));
            results.push((5, criterion_5(case1)));
            results.push((6, criterion_6(case1, case2.as_ref())));
            results.push((7, criterion_7(case1)));
            results.push((8, criterion_8(case1)));
        }
        Err(e) => {
            for n in 3..=8 {
                results.push((n, outcome(false, format!("case 1 experiment failed: {e}"))));
            }
        }
    }
    results.push((9, timed(None, criterion_9)));
    results.push((10, timed(Some(Duration::from_secs(1)), criterion_10)));

    let mut failed = 0;
    for (n, o) in &results {
        println!("[{}] criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
