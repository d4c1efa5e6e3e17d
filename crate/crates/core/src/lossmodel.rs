//! Finite-sum objective, per-sample losses, synthetic data and the
//! least-squares optimum.
//!
//! The global objective is the average of agent objectives, each of which is
//! the average of per-sample losses on that agent's shard:
//!
//! ```text
//! f(θ) = (1/N) Σ_n f_n(θ),    f_n(θ) = (1/L_n) Σ_i f_{n,i}(θ)
//! ```
//!
//! All sums run in ascending index order so results are bit-reproducible.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parameter vector. Also used for local iterates and snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Weights(Vec<f64>);

impl Weights {
    /// Wraps `values`, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "weight entry {pos} is not finite"
            )));
        }
        Ok(Weights(values))
    }

    pub fn zeros(dimension: usize) -> Self {
        Weights(vec![0.0; dimension])
    }

    pub fn filled(dimension: usize, value: f64) -> Self {
        Weights(vec![value; dimension])
    }

    // Iterates may leave the finite range mid-update; callers check with
    // `is_finite` before handing the result out.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Weights(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Weights) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    /// `self - other`
    pub fn sub(&self, other: &Weights) -> Weights {
        debug_assert_eq!(self.len(), other.len());
        Weights(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.0 {
            *v *= alpha;
        }
    }

    pub fn distance(&self, other: &Weights) -> f64 {
        self.sub(other).norm()
    }
}

impl std::ops::Index<usize> for Weights {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One agent's local supervised dataset: `L_n` feature rows of width `d`
/// and one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentShard {
    // row-major, len() * dimension entries
    features: Vec<f64>,
    labels: Vec<f64>,
    dimension: usize,
}

impl AgentShard {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        let dimension = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dimension) {
            return Err(Error::DimensionMismatch {
                context: "feature row",
                expected: dimension,
                actual: bad.len(),
            });
        }
        Self::from_flat(rows.concat(), dimension, labels)
    }

    /// Builds a shard from a row-major feature buffer.
    pub fn from_flat(features: Vec<f64>, dimension: usize, labels: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("shard must hold at least one sample".into()));
        }
        if dimension == 0 {
            return Err(Error::InvalidInput("feature dimension must be at least 1".into()));
        }
        if features.len() != labels.len() * dimension {
            return Err(Error::DimensionMismatch {
                context: "feature buffer",
                expected: labels.len() * dimension,
                actual: features.len(),
            });
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("shard contains non-finite entries".into()));
        }
        Ok(AgentShard {
            features,
            labels,
            dimension,
        })
    }

    /// Number of samples `L_n`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    fn check(&self, i: usize, theta: &Weights) -> Result<()> {
        if theta.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.dimension,
                actual: theta.len(),
            });
        }
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        Ok(())
    }
}

/// The federation's data: one shard per agent, all with the same width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shards: Vec<AgentShard>,
    dimension: usize,
}

impl Dataset {
    pub fn new(shards: Vec<AgentShard>) -> Result<Self> {
        let Some(first) = shards.first() else {
            return Err(Error::InvalidInput("dataset must hold at least one agent".into()));
        };
        let dimension = first.dimension();
        if let Some(bad) = shards.iter().find(|s| s.dimension() != dimension) {
            return Err(Error::DimensionMismatch {
                context: "shard dimension",
                expected: dimension,
                actual: bad.dimension(),
            });
        }
        Ok(Dataset { shards, dimension })
    }

    pub fn shards(&self) -> &[AgentShard] {
        &self.shards
    }

    pub fn shard(&self, n: usize) -> &AgentShard {
        &self.shards[n]
    }

    /// Number of agents `N`.
    pub fn n_agents(&self) -> usize {
        self.shards.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn check(&self, theta: &Weights) -> Result<()> {
        if theta.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.dimension,
                actual: theta.len(),
            });
        }
        Ok(())
    }
}

/// Per-sample loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossModel {
    /// `(ŷ − vθ)²`
    #[default]
    Quadratic,
    /// `log(1 + exp(−ŷ vθ))`
    Logistic,
}

impl LossModel {
    fn loss_raw(self, row: &[f64], label: f64, theta: &[f64]) -> f64 {
        let pred = dot(row, theta);
        match self {
            LossModel::Quadratic => {
                let r = label - pred;
                r * r
            }
            LossModel::Logistic => {
                let z = label * pred;
                // log1p(e^{-z}) without overflow for large |z|
                if z > 0.0 {
                    (-z).exp().ln_1p()
                } else {
                    -z + z.exp().ln_1p()
                }
            }
        }
    }

    /// `∇f_{n,i}(θ) = c · v`; returns `c`.
    fn grad_coeff(self, pred: f64, label: f64) -> f64 {
        match self {
            LossModel::Quadratic => 2.0 * (pred - label),
            LossModel::Logistic => {
                let z = label * pred;
                // σ(−z) = 1 / (1 + e^z)
                -label / (1.0 + z.exp())
            }
        }
    }

    /// Adds `scale * ∇f_{n,i}(θ)` into `out`.
    pub(crate) fn add_grad(self, row: &[f64], label: f64, theta: &[f64], scale: f64, out: &mut [f64]) {
        let c = scale * self.grad_coeff(dot(row, theta), label);
        for (o, v) in out.iter_mut().zip(row) {
            *o += c * v;
        }
    }

    /// Adds `∇f_{n,i}(a) − ∇f_{n,i}(b)` into `out`. Exactly zero when `a == b`.
    pub(crate) fn add_grad_diff(self, row: &[f64], label: f64, a: &[f64], b: &[f64], out: &mut [f64]) {
        let c = match self {
            LossModel::Quadratic => {
                let diff: f64 = row.iter().zip(a.iter().zip(b)).map(|(v, (x, y))| v * (x - y)).sum();
                2.0 * diff
            }
            LossModel::Logistic => {
                self.grad_coeff(dot(row, a), label) - self.grad_coeff(dot(row, b), label)
            }
        };
        if c != 0.0 {
            for (o, v) in out.iter_mut().zip(row) {
                *o += c * v;
            }
        }
    }

    /// Per-sample loss `f_{n,i}(θ)`.
    pub fn component_loss(self, shard: &AgentShard, i: usize, theta: &Weights) -> Result<f64> {
        shard.check(i, theta)?;
        Ok(self.loss_raw(shard.row(i), shard.label(i), theta.as_slice()))
    }

    /// Per-sample gradient `∇f_{n,i}(θ)`.
    pub fn component_grad(self, shard: &AgentShard, i: usize, theta: &Weights) -> Result<Weights> {
        shard.check(i, theta)?;
        let mut g = vec![0.0; theta.len()];
        self.add_grad(shard.row(i), shard.label(i), theta.as_slice(), 1.0, &mut g);
        Ok(Weights::from_raw(g))
    }

    /// Mean per-sample loss `f_n(θ)` on one shard.
    pub fn agent_loss(self, shard: &AgentShard, theta: &Weights) -> Result<f64> {
        shard.check(0, theta)?;
        let sum: f64 = (0..shard.len())
            .map(|i| self.loss_raw(shard.row(i), shard.label(i), theta.as_slice()))
            .sum();
        Ok(sum / shard.len() as f64)
    }

    /// Full local gradient `∇f_n(θ) = (1/L_n) Σ_i ∇f_{n,i}(θ)`.
    pub fn agent_full_grad(self, shard: &AgentShard, theta: &Weights) -> Result<Weights> {
        shard.check(0, theta)?;
        let mut g = vec![0.0; theta.len()];
        self.accumulate_full_grad(shard, theta.as_slice(), &mut g);
        Ok(Weights::from_raw(g))
    }

    fn accumulate_full_grad(self, shard: &AgentShard, theta: &[f64], out: &mut [f64]) {
        for i in 0..shard.len() {
            self.add_grad(shard.row(i), shard.label(i), theta, 1.0, out);
        }
        let inv = 1.0 / shard.len() as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }

    /// Global objective `f(θ)`.
    pub fn global_cost(self, dataset: &Dataset, theta: &Weights) -> Result<f64> {
        dataset.check(theta)?;
        let sum: f64 = dataset
            .shards()
            .iter()
            .map(|s| self.agent_loss(s, theta))
            .sum::<Result<f64>>()?;
        Ok(sum / dataset.n_agents() as f64)
    }

    /// Global gradient `∇f(θ)`, the mean of the agents' full gradients.
    pub fn global_grad(self, dataset: &Dataset, theta: &Weights) -> Result<Weights> {
        dataset.check(theta)?;
        let mut total = Weights::zeros(theta.len());
        for shard in dataset.shards() {
            total.axpy(1.0, &self.agent_full_grad(shard, theta)?);
        }
        total.scale(1.0 / dataset.n_agents() as f64);
        Ok(total)
    }

    /// Upper bound on the Lipschitz constant of every `∇f_{n,i}` (and hence
    /// every `∇f_n` and `∇f`).
    ///
    /// Quadratic: `max 2‖v‖²`. Logistic: `max ‖v‖²/4`, since σ' ≤ 1/4.
    pub fn smoothness_constant(self, dataset: &Dataset) -> f64 {
        let factor = match self {
            LossModel::Quadratic => 2.0,
            LossModel::Logistic => 0.25,
        };
        let max_row_sq = dataset
            .shards()
            .iter()
            .flat_map(|s| (0..s.len()).map(move |i| dot(s.row(i), s.row(i))))
            .fold(0.0_f64, f64::max);
        factor * max_row_sq
    }
}

/// Synthetic linear-regression data.
///
/// Draws `n_agents * samples_per_agent` feature rows with i.i.d. standard
/// normal entries, then a standard normal generating parameter, then labels
/// `vθ + ε` with `ε ~ N(0, noise_std²)`. Rows are dealt to agents in
/// contiguous, equal blocks.
pub fn generate_regression_dataset<R: Rng + ?Sized>(
    n_agents: usize,
    samples_per_agent: usize,
    dimension: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<(Dataset, Weights)> {
    if n_agents == 0 || samples_per_agent == 0 || dimension == 0 {
        return Err(Error::InvalidInput(
            "agent, sample and dimension counts must all be at least 1".into(),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "noise_std must be finite and non-negative, got {noise_std}"
        )));
    }
    let total = n_agents * samples_per_agent;
    let features: Vec<f64> = (0..total * dimension)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let theta_true: Vec<f64> = (0..dimension).map(|_| rng.sample(StandardNormal)).collect();
    let labels: Vec<f64> = (0..total)
        .map(|i| {
            let eps: f64 = rng.sample(StandardNormal);
            dot(&features[i * dimension..(i + 1) * dimension], &theta_true) + noise_std * eps
        })
        .collect();

    let block = samples_per_agent * dimension;
    let shards = (0..n_agents)
        .map(|n| {
            AgentShard::from_flat(
                features[n * block..(n + 1) * block].to_vec(),
                dimension,
                labels[n * samples_per_agent..(n + 1) * samples_per_agent].to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(shards)?, Weights::new(theta_true)?))
}

/// Exact minimizer of the quadratic objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeastSquaresOptimum {
    pub theta: Weights,
    pub cost: f64,
}

/// Solves the agent-weighted normal equations
/// `Σ_n (1/(N L_n)) Σ_i vᵀv θ = Σ_n (1/(N L_n)) Σ_i vᵀŷ`
/// for the quadratic objective.
pub fn least_squares_oracle(dataset: &Dataset) -> Result<LeastSquaresOptimum> {
    let d = dataset.dimension();
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for shard in dataset.shards() {
        let w = 1.0 / (dataset.n_agents() as f64 * shard.len() as f64);
        for i in 0..shard.len() {
            let row = shard.row(i);
            for a in 0..d {
                rhs[a] += w * row[a] * shard.label(i);
                for b in 0..d {
                    gram[(a, b)] += w * row[a] * row[b];
                }
            }
        }
    }
    let chol = gram.clone().cholesky().ok_or(Error::Singular)?;
    let pivots = chol.l_dirty().diagonal();
    let (lo, hi) = (pivots.min(), pivots.max());
    if !(hi > 0.0) || (lo / hi).powi(2) < 1e-13 {
        return Err(Error::Singular);
    }
    let mut theta = chol.solve(&rhs);
    // one step of iterative refinement
    let residual = &rhs - &gram * &theta;
    theta += chol.solve(&residual);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let theta = Weights::new(theta.iter().copied().collect())?;
    let cost = LossModel::Quadratic.global_cost(dataset, &theta)?;
    Ok(LeastSquaresOptimum { theta, cost })
}
