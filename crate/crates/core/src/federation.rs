//! Training rounds: participation sampling, local updates on the active
//! agents, and server-side aggregation.
//!
//! Three variants share the round structure:
//!
//! * `FedAvgSvrg`: Bernoulli participation, SVRG local updates,
//!   inverse-probability weighted aggregation.
//! * `FedAvgProbSgd`: same participation and weighting, local SGD with a
//!   round-dependent stepsize.
//! * `FedAvgUniformBatch`: a uniformly drawn batch of agents without
//!   replacement, local SGD, plain averaging of the returned deltas.
//!
//! Random streams are derived per round (participation) and per
//! `(round, agent)` (local sampling), so running agents in parallel cannot
//! change any result. Aggregation always sums in ascending agent order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localsolver::{sgd_local_update, svrg_local_update, LocalTrace, SvrgParams};
use crate::lossmodel::{Dataset, LossModel, Weights};
use crate::rng::stream;

/// Probabilities below this are rejected: the `1/p` weight would blow up.
pub const MIN_PROBABILITY: f64 = 1e-6;

/// Per-agent, per-round activation probabilities `p_n^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipationSchedule {
    ConstantUniform(f64),
    PerAgentFixed(Vec<f64>),
    /// Indexed `[round][agent]`.
    PerRoundMatrix(Vec<Vec<f64>>),
}

fn check_probability(p: f64, field: impl FnOnce() -> String) -> Result<()> {
    if !(p.is_finite() && p >= MIN_PROBABILITY && p <= 1.0) {
        return Err(Error::config(
            field(),
            format!("participation probability {p} outside [{MIN_PROBABILITY}, 1]"),
        ));
    }
    Ok(())
}

impl ParticipationSchedule {
    pub fn validate(&self, n_agents: usize, rounds: usize) -> Result<()> {
        match self {
            ParticipationSchedule::ConstantUniform(p) => {
                check_probability(*p, || "schedule.p".into())
            }
            ParticipationSchedule::PerAgentFixed(ps) => {
                if ps.len() != n_agents {
                    return Err(Error::config(
                        "schedule.probabilities",
                        format!("expected {n_agents} entries, got {}", ps.len()),
                    ));
                }
                for (n, &p) in ps.iter().enumerate() {
                    check_probability(p, || format!("schedule.probabilities[{n}]"))?;
                }
                Ok(())
            }
            ParticipationSchedule::PerRoundMatrix(rows) => {
                if rows.len() != rounds {
                    return Err(Error::config(
                        "schedule.matrix",
                        format!("expected {rounds} rows, got {}", rows.len()),
                    ));
                }
                for (k, row) in rows.iter().enumerate() {
                    if row.len() != n_agents {
                        return Err(Error::config(
                            format!("schedule.matrix[{k}]"),
                            format!("expected {n_agents} entries, got {}", row.len()),
                        ));
                    }
                    for (n, &p) in row.iter().enumerate() {
                        check_probability(p, || format!("schedule.matrix[{k}][{n}]"))?;
                    }
                }
                Ok(())
            }
        }
    }

    /// `p_n^k`. Panics if `round`/`agent` are outside a matrix schedule.
    pub fn probability(&self, round: usize, agent: usize) -> f64 {
        match self {
            ParticipationSchedule::ConstantUniform(p) => *p,
            ParticipationSchedule::PerAgentFixed(ps) => ps[agent],
            ParticipationSchedule::PerRoundMatrix(rows) => rows[round][agent],
        }
    }

    pub fn round_probabilities(&self, round: usize, n_agents: usize) -> Vec<f64> {
        (0..n_agents).map(|n| self.probability(round, n)).collect()
    }
}

/// Independent Bernoulli draws `1_n^k ~ p_n^k`, one per agent, in agent order.
pub fn sample_participation<R: Rng + ?Sized>(
    schedule: &ParticipationSchedule,
    round: usize,
    n_agents: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if let ParticipationSchedule::PerRoundMatrix(rows) = schedule {
        if round >= rows.len() {
            return Err(Error::config(
                "schedule.matrix",
                format!("no row for round {round} ({} rows)", rows.len()),
            ));
        }
    }
    let probs = schedule.round_probabilities(round, n_agents);
    for (n, &p) in probs.iter().enumerate() {
        check_probability(p, || format!("schedule[{round}][{n}]"))?;
    }
    Ok(probs.iter().map(|&p| rng.random::<f64>() < p).collect())
}

fn check_deltas(theta_k: &Weights, deltas: &[Option<Weights>], indicators: &[bool]) -> Result<()> {
    if deltas.len() != indicators.len() {
        return Err(Error::DimensionMismatch {
            context: "delta list",
            expected: indicators.len(),
            actual: deltas.len(),
        });
    }
    for (n, (delta, &active)) in deltas.iter().zip(indicators).enumerate() {
        match (delta, active) {
            (None, true) => {
                return Err(Error::InvalidInput(format!("active agent {n} returned no delta")))
            }
            (Some(_), false) => {
                return Err(Error::InvalidInput(format!("inactive agent {n} returned a delta")))
            }
            (Some(d), true) if d.len() != theta_k.len() => {
                return Err(Error::DimensionMismatch {
                    context: "agent delta",
                    expected: theta_k.len(),
                    actual: d.len(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// `θ^{k+1} = θ^k + (1/N) Σ_n (1_n^k / p_n^k) Δ_n`, summed in agent order.
pub fn aggregate(
    theta_k: &Weights,
    deltas: &[Option<Weights>],
    indicators: &[bool],
    probs: &[f64],
) -> Result<Weights> {
    check_deltas(theta_k, deltas, indicators)?;
    if probs.len() != indicators.len() {
        return Err(Error::DimensionMismatch {
            context: "probability list",
            expected: indicators.len(),
            actual: probs.len(),
        });
    }
    let n = indicators.len() as f64;
    let mut sum = Weights::zeros(theta_k.len());
    for (delta, &p) in deltas.iter().zip(probs) {
        if let Some(d) = delta {
            if !(p > 0.0) {
                return Err(Error::InvalidInput(format!("non-positive probability {p}")));
            }
            sum.axpy(1.0 / p, d);
        }
    }
    let mut next = theta_k.clone();
    next.axpy(1.0 / n, &sum);
    Ok(next)
}

/// `θ^{k+1} = θ^k + mean of the active deltas`; unchanged if none are active.
pub fn aggregate_plain(theta_k: &Weights, deltas: &[Option<Weights>], indicators: &[bool]) -> Result<Weights> {
    check_deltas(theta_k, deltas, indicators)?;
    let active = indicators.iter().filter(|&&a| a).count();
    let mut next = theta_k.clone();
    if active == 0 {
        return Ok(next);
    }
    let mut sum = Weights::zeros(theta_k.len());
    for d in deltas.iter().flatten() {
        sum.axpy(1.0, d);
    }
    next.axpy(1.0 / active as f64, &sum);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepsizeSchedule {
    /// `δ_k = δ₀ / √(k+1)`
    #[default]
    Decaying,
    /// `δ_k = δ₀` for every round; with `δ₀ = 1/√K` this is the
    /// horizon-tuned constant step.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub local_steps: usize,
    /// Base stepsize `δ₀`.
    pub stepsize: f64,
    pub schedule: StepsizeSchedule,
}

impl SgdParams {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::config("local_steps", "must be at least 1"));
        }
        if !(self.stepsize.is_finite() && self.stepsize > 0.0) {
            return Err(Error::config("stepsize", "must be finite and positive"));
        }
        Ok(())
    }

    pub fn stepsize_at(&self, round: usize) -> f64 {
        match self.schedule {
            StepsizeSchedule::Decaying => self.stepsize / ((round + 1) as f64).sqrt(),
            StepsizeSchedule::Constant => self.stepsize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(rename = "fedavg_svrg")]
    FedAvgSvrg(SvrgParams),
    #[serde(rename = "fedavg_prob_sgd")]
    FedAvgProbSgd(SgdParams),
    #[serde(rename = "fedavg_uniform_batch")]
    FedAvgUniformBatch { batch_size: usize, sgd: SgdParams },
}

/// Seeds for one training run. The participation seed is shared by all
/// algorithms compared on the same run index; the sampling seed is not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub participation: u64,
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub schedule: ParticipationSchedule,
    pub theta0: Weights,
    pub seeds: RunSeeds,
}

impl RunConfig {
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.theta0.len() != dataset.dimension() {
            return Err(Error::config(
                "theta0",
                format!("length {} does not match dimension {}", self.theta0.len(), dataset.dimension()),
            ));
        }
        if !self.theta0.is_finite() {
            return Err(Error::config("theta0", "entries must be finite"));
        }
        match &self.algorithm {
            Algorithm::FedAvgSvrg(p) => p.validate()?,
            Algorithm::FedAvgProbSgd(p) => p.validate()?,
            Algorithm::FedAvgUniformBatch { batch_size, sgd } => {
                sgd.validate()?;
                if *batch_size == 0 || *batch_size > dataset.n_agents() {
                    return Err(Error::config(
                        "batch_size",
                        format!("must be in 1..={}, got {batch_size}", dataset.n_agents()),
                    ));
                }
            }
        }
        if !matches!(self.algorithm, Algorithm::FedAvgUniformBatch { .. }) {
            self.schedule.validate(dataset.n_agents(), self.rounds)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `1_n^k`
    pub indicators: Vec<bool>,
    /// `θ^{k+1}`
    pub theta: Weights,
    /// `f(θ^{k+1})`
    pub cost: f64,
    /// `‖∇f(θ^{k+1})‖²`
    pub grad_norm_sq: f64,
    /// One entry per agent; `Some` exactly for the agents that ran.
    pub local: Vec<Option<LocalTrace>>,
}

impl RoundRecord {
    pub fn n_active(&self) -> usize {
        self.indicators.iter().filter(|&&a| a).count()
    }
}

/// A full training run: the starting point plus one record per round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub theta0: Weights,
    /// `f(θ⁰)`
    pub initial_cost: f64,
    /// `‖∇f(θ⁰)‖²`
    pub initial_grad_norm_sq: f64,
    pub rounds: Vec<RoundRecord>,
}

impl RunTrace {
    pub fn final_theta(&self) -> &Weights {
        self.rounds.last().map_or(&self.theta0, |r| &r.theta)
    }

    /// `‖∇f(θ^k)‖²` for `k = 0..K-1`.
    pub fn pre_round_grad_norms(&self) -> Vec<f64> {
        std::iter::once(self.initial_grad_norm_sq)
            .chain(self.rounds.iter().map(|r| r.grad_norm_sq))
            .take(self.rounds.len())
            .collect()
    }
}

/// Executes round `round` starting from `theta_k`.
pub fn run_round(
    theta_k: &Weights,
    config: &RunConfig,
    dataset: &Dataset,
    model: LossModel,
    round: usize,
) -> Result<RoundRecord> {
    let n_agents = dataset.n_agents();
    let mut part_rng = stream(config.seeds.participation, "participation", &[round as u64]);
    let indicators = match &config.algorithm {
        Algorithm::FedAvgUniformBatch { batch_size, .. } => {
            let mut chosen = vec![false; n_agents];
            for n in rand::seq::index::sample(&mut part_rng, n_agents, *batch_size) {
                chosen[n] = true;
            }
            chosen
        }
        _ => sample_participation(&config.schedule, round, n_agents, &mut part_rng)?,
    };

    let local: Vec<Option<Result<LocalTrace>>> = (0..n_agents)
        .into_par_iter()
        .map(|n| {
            if !indicators[n] {
                return None;
            }
            let mut rng = stream(config.seeds.sampling, "local", &[round as u64, n as u64]);
            let shard = dataset.shard(n);
            Some(match &config.algorithm {
                Algorithm::FedAvgSvrg(p) => svrg_local_update(model, shard, theta_k, p, &mut rng),
                Algorithm::FedAvgProbSgd(p) | Algorithm::FedAvgUniformBatch { sgd: p, .. } => {
                    sgd_local_update(model, shard, theta_k, p.local_steps, p.stepsize_at(round), &mut rng)
                }
            })
        })
        .collect();

    let mut traces = Vec::with_capacity(n_agents);
    for (agent, entry) in local.into_iter().enumerate() {
        traces.push(match entry {
            Some(Ok(t)) => Some(t),
            Some(Err(e)) => {
                return Err(Error::AgentFailure {
                    round,
                    agent,
                    source: Box::new(e),
                })
            }
            None => None,
        });
    }

    let deltas: Vec<Option<Weights>> = traces
        .iter()
        .map(|t| t.as_ref().map(|t| t.delta_w.clone()))
        .collect();
    let theta = match &config.algorithm {
        Algorithm::FedAvgUniformBatch { .. } => aggregate_plain(theta_k, &deltas, &indicators)?,
        _ => aggregate(
            theta_k,
            &deltas,
            &indicators,
            &config.schedule.round_probabilities(round, n_agents),
        )?,
    };
    if !theta.is_finite() {
        return Err(Error::GlobalDivergence { round });
    }
    let cost = model.global_cost(dataset, &theta)?;
    let grad_norm_sq = model.global_grad(dataset, &theta)?.norm_sq();
    if !cost.is_finite() || !grad_norm_sq.is_finite() {
        return Err(Error::GlobalDivergence { round });
    }
    Ok(RoundRecord {
        round,
        indicators,
        theta,
        cost,
        grad_norm_sq,
        local: traces,
    })
}

/// Runs `config.rounds` rounds from `config.theta0`.
pub fn run_training(config: &RunConfig, dataset: &Dataset, model: LossModel) -> Result<RunTrace> {
    config.validate(dataset)?;
    let initial_cost = model.global_cost(dataset, &config.theta0)?;
    let initial_grad_norm_sq = model.global_grad(dataset, &config.theta0)?.norm_sq();
    let mut rounds: Vec<RoundRecord> = Vec::with_capacity(config.rounds);
    let mut theta = config.theta0.clone();
    for k in 0..config.rounds {
        let record = run_round(&theta, config, dataset, model, k)?;
        theta = record.theta.clone();
        rounds.push(record);
    }
    Ok(RunTrace {
        theta0: config.theta0.clone(),
        initial_cost,
        initial_grad_norm_sq,
        rounds,
    })
}
