//! Experiment configuration files.
//!
//! An experiment is one TOML document. Every table rejects unknown keys, so a
//! misspelt field is an error rather than a silently ignored default. The
//! full schema with defaults is documented in the repository README.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    Algorithm, ParticipationSchedule, SgdParams, StepsizeSchedule, MIN_PROBABILITY,
};
use crate::localsolver::SvrgParams;
use crate::lossmodel::Weights;
use crate::rng::stream;

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_master_seed() -> u64 {
    1
}

fn default_participation() -> ParticipationConfig {
    ParticipationConfig {
        kind: ParticipationKind::RandomPerAgent,
        p: None,
        probabilities: None,
        matrix: None,
        low: None,
        high: None,
        seed: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Monte Carlo runs per algorithm.
    pub runs: usize,
    /// Rounds `K` for every algorithm.
    pub rounds: usize,
    /// Starting point: a scalar fill value or an explicit vector.
    pub theta0: Theta0,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default = "default_participation")]
    pub participation: ParticipationConfig,
    pub algorithms: Vec<AlgorithmConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Theta0 {
    Fill(f64),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_agents: usize,
    pub samples_per_agent: usize,
    pub dimension: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticipationKind {
    /// One fixed `p_n` per agent drawn from `Uniform(low, high)`.
    RandomPerAgent,
    Constant,
    PerAgent,
    PerRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipationConfig {
    pub kind: ParticipationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub const DEFAULT_PARTICIPATION_LOW: f64 = 0.2;
pub const DEFAULT_PARTICIPATION_HIGH: f64 = 1.0;
pub const DEFAULT_PARTICIPATION_SEED: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    FedavgSvrg,
    FedavgProbSgd,
    FedavgUniformBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: String,
    pub kind: AlgorithmKind,
    /// SVRG: the constant `δ`. SGD variants: the base stepsize `δ₀`.
    pub stepsize: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stepsize_schedule: Option<StepsizeSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        let d = &self.data;
        for (field, value) in [
            ("data.n_agents", d.n_agents),
            ("data.samples_per_agent", d.samples_per_agent),
            ("data.dimension", d.dimension),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(d.noise_std.is_finite() && d.noise_std >= 0.0) {
            return Err(Error::config("data.noise_std", "must be finite and non-negative"));
        }
        match &self.theta0 {
            Theta0::Fill(x) if !x.is_finite() => {
                return Err(Error::config("theta0", "must be finite"))
            }
            Theta0::Values(v) if v.len() != d.dimension => {
                return Err(Error::config(
                    "theta0",
                    format!("has {} entries, data.dimension is {}", v.len(), d.dimension),
                ))
            }
            Theta0::Values(v) if v.iter().any(|x| !x.is_finite()) => {
                return Err(Error::config("theta0", "entries must be finite"))
            }
            _ => {}
        }
        self.participation.validate(d.n_agents, self.rounds)?;
        if self.algorithms.is_empty() {
            return Err(Error::config("algorithms", "at least one algorithm is required"));
        }
        let mut names = HashSet::new();
        for (i, alg) in self.algorithms.iter().enumerate() {
            if !names.insert(alg.name.as_str()) {
                return Err(Error::config(
                    format!("algorithms[{i}].name"),
                    format!("duplicate algorithm name `{}`", alg.name),
                ));
            }
            self.resolve_algorithm(i)?;
        }
        Ok(())
    }

    pub fn theta0_weights(&self) -> Result<Weights> {
        match &self.theta0 {
            Theta0::Fill(x) => Weights::new(vec![*x; self.data.dimension]),
            Theta0::Values(v) => Weights::new(v.clone()),
        }
        .map_err(|e| Error::config("theta0", e.to_string()))
    }

    /// Local SGD steps for baselines that leave `local_steps` unset: `S·M`
    /// of the first SVRG entry, so both do the same local work.
    fn default_local_steps(&self) -> Option<usize> {
        self.algorithms
            .iter()
            .find(|a| a.kind == AlgorithmKind::FedavgSvrg)
            .and_then(|a| Some(a.snapshots? * a.inner_steps?))
    }

    /// Resolves `algorithms[index]` into a runnable algorithm.
    pub fn resolve_algorithm(&self, index: usize) -> Result<Algorithm> {
        let alg = &self.algorithms[index];
        let path = |f: &str| format!("algorithms[{index}].{f}");
        if alg.name.is_empty()
            || !alg
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(Error::config(
                path("name"),
                "must be non-empty and use only ASCII letters, digits, `_` or `-`",
            ));
        }
        if !(alg.stepsize.is_finite() && alg.stepsize > 0.0) {
            return Err(Error::config(path("stepsize"), "must be finite and positive"));
        }
        let forbid = |field: &str, present: bool| -> Result<()> {
            if present {
                Err(Error::config(
                    path(field),
                    format!("not applicable to {:?}", alg.kind),
                ))
            } else {
                Ok(())
            }
        };
        match alg.kind {
            AlgorithmKind::FedavgSvrg => {
                forbid("local_steps", alg.local_steps.is_some())?;
                forbid("stepsize_schedule", alg.stepsize_schedule.is_some())?;
                forbid("batch_size", alg.batch_size.is_some())?;
                let snapshots = alg
                    .snapshots
                    .ok_or_else(|| Error::config(path("snapshots"), "required for fedavg_svrg"))?;
                let inner_steps = alg
                    .inner_steps
                    .ok_or_else(|| Error::config(path("inner_steps"), "required for fedavg_svrg"))?;
                let params = SvrgParams {
                    snapshots,
                    inner_steps,
                    stepsize: alg.stepsize,
                };
                params.validate().map_err(|e| match e {
                    Error::Config { field, message } => Error::config(path(&field), message),
                    other => other,
                })?;
                Ok(Algorithm::FedAvgSvrg(params))
            }
            AlgorithmKind::FedavgProbSgd | AlgorithmKind::FedavgUniformBatch => {
                forbid("snapshots", alg.snapshots.is_some())?;
                forbid("inner_steps", alg.inner_steps.is_some())?;
                let local_steps = match alg.local_steps {
                    Some(0) => return Err(Error::config(path("local_steps"), "must be at least 1")),
                    Some(n) => n,
                    None => self.default_local_steps().ok_or_else(|| {
                        Error::config(
                            path("local_steps"),
                            "required when the experiment has no fedavg_svrg entry",
                        )
                    })?,
                };
                let sgd = SgdParams {
                    local_steps,
                    stepsize: alg.stepsize,
                    schedule: alg.stepsize_schedule.unwrap_or_default(),
                };
                if alg.kind == AlgorithmKind::FedavgProbSgd {
                    forbid("batch_size", alg.batch_size.is_some())?;
                    return Ok(Algorithm::FedAvgProbSgd(sgd));
                }
                let batch_size = alg
                    .batch_size
                    .ok_or_else(|| Error::config(path("batch_size"), "required for fedavg_uniform_batch"))?;
                if batch_size == 0 || batch_size > self.data.n_agents {
                    return Err(Error::config(
                        path("batch_size"),
                        format!("must be in 1..={}", self.data.n_agents),
                    ));
                }
                Ok(Algorithm::FedAvgUniformBatch { batch_size, sgd })
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("cannot serialize config: {e}")))
    }
}

impl ParticipationConfig {
    fn check_p(field: String, p: f64) -> Result<()> {
        if !(p.is_finite() && p >= MIN_PROBABILITY && p <= 1.0) {
            return Err(Error::config(
                field,
                format!("probability {p} outside [{MIN_PROBABILITY}, 1]"),
            ));
        }
        Ok(())
    }

    fn validate(&self, n_agents: usize, rounds: usize) -> Result<()> {
        let unexpected = |field: &str, present: bool| -> Result<()> {
            if present {
                Err(Error::config(
                    format!("participation.{field}"),
                    format!("not applicable to kind {:?}", self.kind),
                ))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ParticipationKind::RandomPerAgent => {
                unexpected("p", self.p.is_some())?;
                unexpected("probabilities", self.probabilities.is_some())?;
                unexpected("matrix", self.matrix.is_some())?;
                let low = self.low.unwrap_or(DEFAULT_PARTICIPATION_LOW);
                let high = self.high.unwrap_or(DEFAULT_PARTICIPATION_HIGH);
                Self::check_p("participation.low".into(), low)?;
                Self::check_p("participation.high".into(), high)?;
                if low > high {
                    return Err(Error::config("participation.low", "must not exceed participation.high"));
                }
            }
            ParticipationKind::Constant => {
                for (f, present) in [
                    ("probabilities", self.probabilities.is_some()),
                    ("matrix", self.matrix.is_some()),
                    ("low", self.low.is_some()),
                    ("high", self.high.is_some()),
                    ("seed", self.seed.is_some()),
                ] {
                    unexpected(f, present)?;
                }
                let p = self
                    .p
                    .ok_or_else(|| Error::config("participation.p", "required for kind constant"))?;
                Self::check_p("participation.p".into(), p)?;
            }
            ParticipationKind::PerAgent => {
                for (f, present) in [
                    ("p", self.p.is_some()),
                    ("matrix", self.matrix.is_some()),
                    ("low", self.low.is_some()),
                    ("high", self.high.is_some()),
                    ("seed", self.seed.is_some()),
                ] {
                    unexpected(f, present)?;
                }
                let ps = self.probabilities.as_ref().ok_or_else(|| {
                    Error::config("participation.probabilities", "required for kind per_agent")
                })?;
                if ps.len() != n_agents {
                    return Err(Error::config(
                        "participation.probabilities",
                        format!("expected {n_agents} entries, got {}", ps.len()),
                    ));
                }
                for (n, &p) in ps.iter().enumerate() {
                    Self::check_p(format!("participation.probabilities[{n}]"), p)?;
                }
            }
            ParticipationKind::PerRound => {
                for (f, present) in [
                    ("p", self.p.is_some()),
                    ("probabilities", self.probabilities.is_some()),
                    ("low", self.low.is_some()),
                    ("high", self.high.is_some()),
                    ("seed", self.seed.is_some()),
                ] {
                    unexpected(f, present)?;
                }
                let m = self.matrix.as_ref().ok_or_else(|| {
                    Error::config("participation.matrix", "required for kind per_round")
                })?;
                if m.len() != rounds {
                    return Err(Error::config(
                        "participation.matrix",
                        format!("expected {rounds} rows, got {}", m.len()),
                    ));
                }
                for (k, row) in m.iter().enumerate() {
                    if row.len() != n_agents {
                        return Err(Error::config(
                            format!("participation.matrix[{k}]"),
                            format!("expected {n_agents} entries, got {}", row.len()),
                        ));
                    }
                    for (n, &p) in row.iter().enumerate() {
                        Self::check_p(format!("participation.matrix[{k}][{n}]"), p)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Builds the concrete schedule; random draws use their own seed so they
    /// are shared by every algorithm and run of the experiment.
    pub fn resolve(&self, n_agents: usize) -> ParticipationSchedule {
        match self.kind {
            ParticipationKind::RandomPerAgent => {
                let low = self.low.unwrap_or(DEFAULT_PARTICIPATION_LOW);
                let high = self.high.unwrap_or(DEFAULT_PARTICIPATION_HIGH);
                let mut rng = stream(
                    self.seed.unwrap_or(DEFAULT_PARTICIPATION_SEED),
                    "participation-probabilities",
                    &[],
                );
                ParticipationSchedule::PerAgentFixed(
                    (0..n_agents)
                        .map(|_| low + (high - low) * rng.random::<f64>())
                        .collect(),
                )
            }
            ParticipationKind::Constant => {
                ParticipationSchedule::ConstantUniform(self.p.expect("validated"))
            }
            ParticipationKind::PerAgent => {
                ParticipationSchedule::PerAgentFixed(self.probabilities.clone().expect("validated"))
            }
            ParticipationKind::PerRound => {
                ParticipationSchedule::PerRoundMatrix(self.matrix.clone().expect("validated"))
            }
        }
    }
}

/// Parses and validates an experiment file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        if message.contains("unknown field") {
            Error::config("<unknown key>", message)
        } else {
            Error::Parse {
                path: origin.to_path_buf(),
                message: e.to_string(),
            }
        }
    })?;
    config.validate()?;
    Ok(config)
}
