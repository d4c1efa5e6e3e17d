//! Agent-local update rules: SVRG with `S` snapshots of `M` inner steps, and
//! plain SGD for the baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lossmodel::{AgentShard, LossModel, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrgParams {
    /// Number of snapshots `S`.
    pub snapshots: usize,
    /// Inner steps `M` between consecutive snapshots.
    pub inner_steps: usize,
    /// Constant stepsize `δ`.
    pub stepsize: f64,
}

impl SvrgParams {
    pub fn new(snapshots: usize, inner_steps: usize, stepsize: f64) -> Result<Self> {
        let params = SvrgParams {
            snapshots,
            inner_steps,
            stepsize,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snapshots == 0 {
            return Err(Error::config("snapshots", "must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps", "must be at least 1"));
        }
        if !(self.stepsize.is_finite() && self.stepsize > 0.0) {
            return Err(Error::config("stepsize", "must be finite and positive"));
        }
        Ok(())
    }

    // The kernel itself tolerates δ = 0 (a no-op update).
    fn check_kernel(&self) -> Result<()> {
        if self.snapshots == 0 || self.inner_steps == 0 {
            return Err(Error::config("snapshots/inner_steps", "must be at least 1"));
        }
        if !(self.stepsize.is_finite() && self.stepsize >= 0.0) {
            return Err(Error::config("stepsize", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Total inner steps per round, `S·M`.
    pub fn total_steps(&self) -> usize {
        self.snapshots * self.inner_steps
    }
}

/// What one agent reports back after a local update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalTrace {
    rows: usize,
    cols: usize,
    // ‖v‖² per executed step, row-major rows × cols
    v_sq_norms: Vec<f64>,
    /// Final local iterate minus the starting global parameter.
    pub delta_w: Weights,
    /// Component-gradient evaluations performed, full-gradient passes included.
    pub grad_evals: usize,
}

impl LocalTrace {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `‖v_{s,m}‖²`
    pub fn v_sq_norm(&self, s: usize, m: usize) -> f64 {
        assert!(s < self.rows && m < self.cols, "trace index out of range");
        self.v_sq_norms[s * self.cols + m]
    }

    pub fn v_sq_norms(&self) -> &[f64] {
        &self.v_sq_norms
    }
}

fn check_dims(shard: &AgentShard, w: &Weights) -> Result<()> {
    if w.len() != shard.dimension() {
        return Err(Error::DimensionMismatch {
            context: "parameter vector",
            expected: shard.dimension(),
            actual: w.len(),
        });
    }
    Ok(())
}

/// `v = ∇f_#(w) − ∇f_#(w̃) + μ̃`, where `mu_tilde` is the full local gradient
/// at `w_tilde`.
pub fn variance_reduced_grad(
    model: LossModel,
    shard: &AgentShard,
    w: &Weights,
    w_tilde: &Weights,
    mu_tilde: &Weights,
    sample: usize,
) -> Result<Weights> {
    for x in [w, w_tilde, mu_tilde] {
        check_dims(shard, x)?;
    }
    if sample >= shard.len() {
        return Err(Error::IndexOutOfRange {
            index: sample,
            len: shard.len(),
        });
    }
    let mut v = mu_tilde.as_slice().to_vec();
    vr_grad_into(model, shard, w, w_tilde, sample, &mut v);
    Ok(Weights::from_raw(v))
}

// out must hold μ̃ on entry
fn vr_grad_into(
    model: LossModel,
    shard: &AgentShard,
    w: &Weights,
    w_tilde: &Weights,
    sample: usize,
    out: &mut [f64],
) {
    model.add_grad_diff(shard.row(sample), shard.label(sample), w.as_slice(), w_tilde.as_slice(), out);
}

/// SVRG local update driven by `rng`; each inner step draws its sample
/// uniformly with replacement.
pub fn svrg_local_update<R: Rng + ?Sized>(
    model: LossModel,
    shard: &AgentShard,
    theta_k: &Weights,
    params: &SvrgParams,
    rng: &mut R,
) -> Result<LocalTrace> {
    svrg_local_update_with(model, shard, theta_k, params, |len| rng.random_range(0..len))
}

/// SVRG local update with an explicit sample picker; `pick(L_n)` must
/// return an index below `L_n`.
pub fn svrg_local_update_with<F>(
    model: LossModel,
    shard: &AgentShard,
    theta_k: &Weights,
    params: &SvrgParams,
    mut pick: F,
) -> Result<LocalTrace>
where
    F: FnMut(usize) -> usize,
{
    params.check_kernel()?;
    check_dims(shard, theta_k)?;
    let (s_count, m_count) = (params.snapshots, params.inner_steps);
    let mut v_sq_norms = Vec::with_capacity(s_count * m_count);
    let mut grad_evals = 0;

    let mut w_tilde = theta_k.clone();
    let mut v = vec![0.0; theta_k.len()];
    for s in 0..s_count {
        let mu_tilde = model.agent_full_grad(shard, &w_tilde)?;
        grad_evals += shard.len();
        let mut w = w_tilde.clone();
        for m in 0..m_count {
            let sample = pick(shard.len());
            if sample >= shard.len() {
                return Err(Error::IndexOutOfRange {
                    index: sample,
                    len: shard.len(),
                });
            }
            v.copy_from_slice(mu_tilde.as_slice());
            vr_grad_into(model, shard, &w, &w_tilde, sample, &mut v);
            grad_evals += 2;
            let sq: f64 = v.iter().map(|x| x * x).sum();
            for (wi, vi) in w.as_mut_slice().iter_mut().zip(&v) {
                *wi -= params.stepsize * vi;
            }
            if !sq.is_finite() || !w.is_finite() {
                return Err(Error::LocalDivergence { snapshot: s, step: m });
            }
            v_sq_norms.push(sq);
        }
        w_tilde = w;
    }

    Ok(LocalTrace {
        rows: s_count,
        cols: m_count,
        v_sq_norms,
        delta_w: w_tilde.sub(theta_k),
        grad_evals,
    })
}

/// Plain local SGD with a fixed stepsize for this round.
pub fn sgd_local_update<R: Rng + ?Sized>(
    model: LossModel,
    shard: &AgentShard,
    theta_k: &Weights,
    steps: usize,
    stepsize: f64,
    rng: &mut R,
) -> Result<LocalTrace> {
    sgd_local_update_with(model, shard, theta_k, steps, stepsize, |len| {
        rng.random_range(0..len)
    })
}

pub fn sgd_local_update_with<F>(
    model: LossModel,
    shard: &AgentShard,
    theta_k: &Weights,
    steps: usize,
    stepsize: f64,
    mut pick: F,
) -> Result<LocalTrace>
where
    F: FnMut(usize) -> usize,
{
    if steps == 0 {
        return Err(Error::config("local_steps", "must be at least 1"));
    }
    if !(stepsize.is_finite() && stepsize >= 0.0) {
        return Err(Error::config("stepsize", "must be finite and non-negative"));
    }
    check_dims(shard, theta_k)?;
    let mut w = theta_k.clone();
    let mut g = vec![0.0; theta_k.len()];
    let mut v_sq_norms = Vec::with_capacity(steps);
    for m in 0..steps {
        let sample = pick(shard.len());
        if sample >= shard.len() {
            return Err(Error::IndexOutOfRange {
                index: sample,
                len: shard.len(),
            });
        }
        g.iter_mut().for_each(|x| *x = 0.0);
        model.add_grad(shard.row(sample), shard.label(sample), w.as_slice(), 1.0, &mut g);
        let sq: f64 = g.iter().map(|x| x * x).sum();
        for (wi, gi) in w.as_mut_slice().iter_mut().zip(&g) {
            *wi -= stepsize * gi;
        }
        if !sq.is_finite() || !w.is_finite() {
            return Err(Error::LocalDivergence { snapshot: 0, step: m });
        }
        v_sq_norms.push(sq);
    }
    Ok(LocalTrace {
        rows: 1,
        cols: steps,
        v_sq_norms,
        delta_w: w.sub(theta_k),
        grad_evals: steps,
    })
}
