//! Cross-run statistics and the numerical convergence-bound check.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::federation::{ParticipationSchedule, RunTrace};
use crate::localsolver::SvrgParams;
use crate::lossmodel::Weights;

/// Cost error `f(θ^{k+1}_r) − f*` per run (rows) and round (columns).
pub fn cost_error_trace(runs: &[RunTrace], f_star: f64) -> Vec<Vec<f64>> {
    runs.iter()
        .map(|run| run.rounds.iter().map(|r| r.cost - f_star).collect())
        .collect()
}

/// Per-round unbiased sample variance across runs (divides by `runs − 1`).
pub fn mc_variance_trace(cost_matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    if cost_matrix.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "variance needs at least 2 runs, got {}",
            cost_matrix.len()
        )));
    }
    let k = cost_matrix[0].len();
    if let Some(row) = cost_matrix.iter().find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch {
            context: "cost matrix row",
            expected: k,
            actual: row.len(),
        });
    }
    // Welford, one accumulator per round
    let mut mean = vec![0.0; k];
    let mut m2 = vec![0.0; k];
    for (count, row) in cost_matrix.iter().enumerate() {
        let count = (count + 1) as f64;
        for j in 0..k {
            let delta = row[j] - mean[j];
            mean[j] += delta / count;
            m2[j] += delta * (row[j] - mean[j]);
        }
    }
    let denom = (cost_matrix.len() - 1) as f64;
    Ok(m2.into_iter().map(|v| (v / denom).max(0.0)).collect())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mean_point(points: &[&[f64]]) -> Vec<f64> {
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p.iter()) {
            *m += x;
        }
    }
    let inv = 1.0 / points.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

fn cep_of(points: &[&[f64]]) -> f64 {
    let center = mean_point(points);
    let dists = points
        .iter()
        .map(|p| {
            p.iter()
                .zip(&center)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    median(dists)
}

fn check_points(final_thetas: &[Weights]) -> Result<usize> {
    let Some(first) = final_thetas.first() else {
        return Err(Error::InvalidInput("CEP needs at least one run".into()));
    };
    let d = first.len();
    if let Some(bad) = final_thetas.iter().find(|t| t.len() != d) {
        return Err(Error::DimensionMismatch {
            context: "final parameter",
            expected: d,
            actual: bad.len(),
        });
    }
    Ok(d)
}

/// Circular error probable: the median Euclidean distance of the final
/// iterates from their mean, over all `d` coordinates.
pub fn cep_radius(final_thetas: &[Weights]) -> Result<f64> {
    check_points(final_thetas)?;
    let points: Vec<&[f64]> = final_thetas.iter().map(Weights::as_slice).collect();
    Ok(cep_of(&points))
}

/// CEP of the projection onto the first two coordinates, for 2-D plots.
pub fn cep_radius_2d(final_thetas: &[Weights]) -> Result<f64> {
    let d = check_points(final_thetas)?;
    let keep = d.min(2);
    let points: Vec<&[f64]> = final_thetas.iter().map(|t| &t.as_slice()[..keep]).collect();
    Ok(cep_of(&points))
}

/// Both sides of the FedAvg-SVRG convergence bound,
///
/// ```text
/// (1/K) Σ_k E‖∇f(θ^k)‖²
///   ≤ 2/(δKSM) (f(θ⁰) − f*)
///   + δ²𝖫²(M−1)(S−1)/(KSMN) Σ_k Σ_n Σ_s Σ_m Σ_{s'≤s} Σ_{m'<m} E‖δ v_{n,s',m'}^k‖²
///   + δ𝖫/(KN) Σ_k Σ_n (1/p_n^k) Σ_{s,m} E‖v_{n,s,m}^k‖²
/// ```
///
/// with expectations replaced by Monte Carlo averages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub optimality_term: f64,
    pub drift_term: f64,
    pub variance_term: f64,
    /// `(k, n)` cells where agent `n` was never active in round `k` across
    /// all runs; their `E‖v‖²` is imputed from the other agents of round `k`
    /// (or from all observed cells if round `k` saw no activity at all).
    pub imputed_cells: usize,
    pub holds: bool,
}

/// Evaluates the bound from FedAvg-SVRG traces. `smoothness` is `𝖫`,
/// `f0` is `f(θ⁰)`.
pub fn theorem_bound_check(
    runs: &[RunTrace],
    smoothness: f64,
    f0: f64,
    f_star: f64,
    params: &SvrgParams,
    schedule: &ParticipationSchedule,
) -> Result<BoundReport> {
    let Some(first) = runs.first() else {
        return Err(Error::InvalidInput("bound check needs at least one run".into()));
    };
    let k_rounds = first.rounds.len();
    if k_rounds == 0 {
        return Err(Error::InvalidInput("bound check needs at least one round".into()));
    }
    let n_agents = first.rounds[0].indicators.len();
    let (s_count, m_count) = (params.snapshots, params.inner_steps);
    let cells = s_count * m_count;

    // sums[k][n] holds per-(s, m) totals over the runs where n was active
    let mut sums = vec![vec![vec![0.0; cells]; n_agents]; k_rounds];
    let mut counts = vec![vec![0usize; n_agents]; k_rounds];
    for run in runs {
        if run.rounds.len() != k_rounds {
            return Err(Error::DimensionMismatch {
                context: "rounds per run",
                expected: k_rounds,
                actual: run.rounds.len(),
            });
        }
        for (k, record) in run.rounds.iter().enumerate() {
            if record.local.len() != n_agents {
                return Err(Error::DimensionMismatch {
                    context: "agents per round",
                    expected: n_agents,
                    actual: record.local.len(),
                });
            }
            for (n, trace) in record.local.iter().enumerate() {
                let Some(trace) = trace else { continue };
                if trace.shape() != (s_count, m_count) {
                    return Err(Error::InvalidInput(format!(
                        "local trace shape {:?} does not match S={s_count}, M={m_count}",
                        trace.shape()
                    )));
                }
                for (acc, v) in sums[k][n].iter_mut().zip(trace.v_sq_norms()) {
                    *acc += v;
                }
                counts[k][n] += 1;
            }
        }
    }

    let mut expect: Vec<Vec<Option<Vec<f64>>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, cnt)| {
            row.into_iter()
                .zip(cnt)
                .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|x| x / c as f64).collect()))
                .collect()
        })
        .collect();

    let average = |cells_iter: &mut dyn Iterator<Item = &Vec<f64>>| -> Option<Vec<f64>> {
        let mut acc = vec![0.0; cells];
        let mut c = 0usize;
        for e in cells_iter {
            acc.iter_mut().zip(e).for_each(|(a, x)| *a += x);
            c += 1;
        }
        (c > 0).then(|| acc.into_iter().map(|a| a / c as f64).collect())
    };
    let global_fill = average(&mut expect.iter().flatten().flatten()).unwrap_or_else(|| vec![0.0; cells]);
    let mut imputed_cells = 0;
    for row in expect.iter_mut() {
        let fill = average(&mut row.iter().flatten()).unwrap_or_else(|| global_fill.clone());
        for e in row.iter_mut().filter(|e| e.is_none()) {
            *e = Some(fill.clone());
            imputed_cells += 1;
        }
    }

    let delta = params.stepsize;
    let (kf, sf, mf, nf) = (k_rounds as f64, s_count as f64, m_count as f64, n_agents as f64);
    let mut nested = 0.0;
    let mut weighted = 0.0;
    for (k, row) in expect.iter().enumerate() {
        for (n, e) in row.iter().enumerate() {
            let e = e.as_ref().expect("filled above");
            for s in 0..s_count {
                for m in 0..m_count {
                    for sp in 0..=s {
                        for mp in 0..m {
                            nested += delta * delta * e[sp * m_count + mp];
                        }
                    }
                }
            }
            weighted += e.iter().sum::<f64>() / schedule.probability(k, n);
        }
    }

    let optimality_term = 2.0 / (delta * kf * sf * mf) * (f0 - f_star);
    let drift_term = delta * delta * smoothness * smoothness * (mf - 1.0) * (sf - 1.0) / (kf * sf * mf * nf) * nested;
    let variance_term = delta * smoothness / (kf * nf) * weighted;
    let rhs = optimality_term + drift_term + variance_term;

    let lhs = runs
        .iter()
        .map(|run| run.pre_round_grad_norms().iter().sum::<f64>() / kf)
        .sum::<f64>()
        / runs.len() as f64;

    Ok(BoundReport {
        lhs,
        rhs,
        optimality_term,
        drift_term,
        variance_term,
        imputed_cells,
        holds: lhs <= rhs,
    })
}

/// Cross-run summary for one algorithm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub mean_cost_error: Vec<f64>,
    /// `None` when fewer than two runs are available.
    pub var_cost: Option<Vec<f64>>,
    pub cep_radius: f64,
    pub cep_radius_2d: f64,
    pub per_run_final_theta: Vec<Weights>,
    pub bound: Option<BoundReport>,
}

impl McSummary {
    pub fn final_mean_cost_error(&self) -> Option<f64> {
        self.mean_cost_error.last().copied()
    }

    pub fn final_variance(&self) -> Option<f64> {
        self.var_cost.as_ref().and_then(|v| v.last().copied())
    }

    /// Mean of the variance trace over the last `window` rounds.
    pub fn tail_variance(&self, window: usize) -> Option<f64> {
        let v = self.var_cost.as_ref()?;
        let tail = &v[v.len().saturating_sub(window)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

pub fn summarize(runs: &[RunTrace], f_star: f64, bound: Option<BoundReport>) -> Result<McSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("summary needs at least one run".into()));
    }
    let errors = cost_error_trace(runs, f_star);
    let k = errors[0].len();
    let mean_cost_error = (0..k)
        .map(|j| errors.iter().map(|row| row[j]).sum::<f64>() / runs.len() as f64)
        .collect();
    let var_cost = if runs.len() >= 2 {
        Some(mc_variance_trace(&errors)?)
    } else {
        None
    };
    let finals: Vec<Weights> = runs.iter().map(|r| r.final_theta().clone()).collect();
    Ok(McSummary {
        mean_cost_error,
        var_cost,
        cep_radius: cep_radius(&finals)?,
        cep_radius_2d: cep_radius_2d(&finals)?,
        per_run_final_theta: finals,
        bound,
    })
}
