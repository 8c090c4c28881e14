//! Successor matrices, Q-functions and optimal values.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, sup_norm};
use crate::mdp::{check_discount, repeat_mdp, Policy, PolicyOperator, TabularMdp};

/// Residual tolerance for the closed-form solve.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;

/// Iteration cap used by [`repeat_value_error`].
pub const VALUE_ITERATION_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrSource {
    ExactClosedForm,
    Neumann,
    FbFactorized,
}

/// Dense successor matrix over state-action pairs.
#[derive(Debug, Clone)]
pub struct SuccessorMatrix {
    pub m: DMatrix<f64>,
    pub gamma: f64,
    pub repeat_k: usize,
    pub source: SrSource,
}

impl SuccessorMatrix {
    pub fn n_pairs(&self) -> usize {
        self.m.nrows()
    }

    /// `‖m − I − γ·P·m‖_max`.
    pub fn bellman_residual(&self, p_pi: &DMatrix<f64>) -> f64 {
        let n = self.m.nrows();
        let r = &self.m - DMatrix::identity(n, n) - p_pi * &self.m * self.gamma;
        max_abs(&r)
    }
}

/// `M = (I − γ P^π)⁻¹` by LU solve against the identity.
pub fn sr_closed_form(op: &PolicyOperator, gamma: f64) -> Result<SuccessorMatrix> {
    check_discount(gamma)?;
    let n = op.n_pairs();
    let identity = DMatrix::<f64>::identity(n, n);
    let a = &identity - &op.p_pi * gamma;
    let m = a
        .clone()
        .lu()
        .solve(&identity)
        .ok_or_else(|| Error::Solve("singular system I - γP".into()))?;
    let residual = max_abs(&(&a * &m - &identity));
    if !residual.is_finite() || residual > SOLVE_RESIDUAL_TOL {
        return Err(Error::Solve(format!(
            "residual {residual:e} exceeds {SOLVE_RESIDUAL_TOL:e}"
        )));
    }
    Ok(SuccessorMatrix {
        m,
        gamma,
        repeat_k: op.repeat_k,
        source: SrSource::ExactClosedForm,
    })
}

/// Partial sum `Σ_{t=0}^{T} γᵗ Pᵗ`. Every row falls short of `1/(1−γ)` by
/// exactly `γ^{T+1}/(1−γ)`.
pub fn sr_neumann(op: &PolicyOperator, gamma: f64, horizon: usize) -> Result<SuccessorMatrix> {
    check_discount(gamma)?;
    let n = op.n_pairs();
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for _ in 0..horizon {
        term = &op.p_pi * &term * gamma;
        sum += &term;
    }
    Ok(SuccessorMatrix {
        m: sum,
        gamma,
        repeat_k: op.repeat_k,
        source: SrSource::Neumann,
    })
}

/// Truncation deficit of [`sr_neumann`] for horizon `T`.
pub fn neumann_tail(gamma: f64, horizon: usize) -> f64 {
    gamma.powi(horizon as i32 + 1) / (1.0 - gamma)
}

/// Reward over state-action pairs, indexed state-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTask {
    pub r: DVector<f64>,
    pub name: String,
}

#[derive(Debug, Deserialize)]
struct RewardRow {
    state_index: usize,
    action_index: usize,
    reward: f64,
}

impl RewardTask {
    pub fn new(r: DVector<f64>, name: impl Into<String>) -> Result<Self> {
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(RewardTask {
            r,
            name: name.into(),
        })
    }

    pub fn zero(n_pairs: usize) -> Self {
        RewardTask {
            r: DVector::zeros(n_pairs),
            name: "zero".into(),
        }
    }

    /// Reward 1 for every action taken in `state`.
    pub fn goal(state: usize, n_states: usize, n_actions: usize) -> Result<Self> {
        if state >= n_states {
            return Err(Error::Dimension(format!(
                "goal state {state} out of range for {n_states} states"
            )));
        }
        let mut r = DVector::zeros(n_states * n_actions);
        for a in 0..n_actions {
            r[state * n_actions + a] = 1.0;
        }
        Ok(RewardTask {
            r,
            name: format!("goal({state})"),
        })
    }

    /// CSV with columns `state_index,action_index,reward`; absent pairs are 0.
    pub fn from_csv_reader<R: std::io::Read>(
        reader: R,
        n_states: usize,
        n_actions: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut seen = HashMap::new();
        let mut r = DVector::zeros(n_states * n_actions);
        for row in rdr.deserialize() {
            let row: RewardRow = row?;
            if row.state_index >= n_states || row.action_index >= n_actions {
                return Err(Error::Dimension(format!(
                    "reward row ({}, {}) outside {n_states}x{n_actions}",
                    row.state_index, row.action_index
                )));
            }
            if !row.reward.is_finite() {
                return Err(Error::NonFinite);
            }
            let idx = row.state_index * n_actions + row.action_index;
            if seen.insert(idx, ()).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate reward row ({}, {})",
                    row.state_index, row.action_index
                )));
            }
            r[idx] = row.reward;
        }
        Ok(RewardTask {
            r,
            name: name.into(),
        })
    }

    pub fn from_csv(path: impl AsRef<Path>, n_states: usize, n_actions: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into());
        Self::from_csv_reader(file, n_states, n_actions, name)
    }
}

/// `Q = M · r`.
pub fn q_from_sr(sr: &SuccessorMatrix, task: &RewardTask) -> Result<DVector<f64>> {
    if sr.m.ncols() != task.r.len() {
        return Err(Error::Dimension(format!(
            "SR has {} columns, reward has {} entries",
            sr.m.ncols(),
            task.r.len()
        )));
    }
    Ok(&sr.m * &task.r)
}

/// Greedy deterministic policy over a state-action value vector, ties going to
/// the lowest action index.
pub fn greedy_policy(q: &DVector<f64>, n_states: usize, n_actions: usize) -> Result<Policy> {
    if q.len() != n_states * n_actions {
        return Err(Error::Dimension(format!(
            "Q has {} entries, expected {}",
            q.len(),
            n_states * n_actions
        )));
    }
    let actions: Vec<usize> = (0..n_states)
        .map(|s| {
            let mut best = 0;
            for a in 1..n_actions {
                if q[s * n_actions + a] > q[s * n_actions + best] {
                    best = a;
                }
            }
            best
        })
        .collect();
    Policy::deterministic(&actions, n_actions)
}

fn check_task(mdp: &TabularMdp, task: &RewardTask) -> Result<()> {
    if task.r.len() != mdp.n_pairs() {
        return Err(Error::Dimension(format!(
            "reward has {} entries, MDP has {} state-action pairs",
            task.r.len(),
            mdp.n_pairs()
        )));
    }
    Ok(())
}

/// Value iteration on state-action values. Stops once the sup-norm update
/// falls below `tol·(1−γ)/γ`, which bounds the distance to `Q*` by `tol`.
pub fn optimal_q(
    mdp: &TabularMdp,
    task: &RewardTask,
    tol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, Policy)> {
    check_task(mdp, task)?;
    if tol.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let gamma = mdp.gamma();
    let threshold = tol * (1.0 - gamma) / gamma;
    let mut q = DVector::<f64>::zeros(ns * na);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let v = DVector::from_fn(ns, |s, _| {
            (0..na)
                .map(|a| q[s * na + a])
                .fold(f64::NEG_INFINITY, f64::max)
        });
        let mut next = DVector::zeros(ns * na);
        for a in 0..na {
            let backup = mdp.transition(a) * &v;
            for s in 0..ns {
                next[s * na + a] = task.r[s * na + a] + gamma * backup[s];
            }
        }
        residual = sup_norm(&(&next - &q));
        q = next;
        if residual < threshold {
            let policy = greedy_policy(&q, ns, na)?;
            return Ok((q, policy));
        }
    }
    Err(Error::NoConvergence {
        iters: max_iters,
        residual,
    })
}

/// `‖Q* − Q̃*‖_∞` between the MDP and its k-repeat counterpart, both solved to
/// `tol`. The two share the same state-action set.
pub fn repeat_value_error(mdp: &TabularMdp, task: &RewardTask, k: usize, tol: f64) -> Result<f64> {
    let repeated = repeat_mdp(mdp, k)?;
    let (q, _) = optimal_q(mdp, task, tol, VALUE_ITERATION_CAP)?;
    let (q_rep, _) = optimal_q(&repeated, task, tol, VALUE_ITERATION_CAP)?;
    Ok(sup_norm(&(q - q_rep)))
}

fn check_repeat_discount(gamma: f64, k: usize) -> Result<()> {
    check_discount(gamma)?;
    if k == 0 {
        return Err(Error::ZeroRepeat);
    }
    Ok(())
}

/// Per-step discount implied by a nominal discount in the k-repeat MDP.
pub fn effective_discount(gamma_nominal: f64, k: usize) -> Result<f64> {
    check_repeat_discount(gamma_nominal, k)?;
    Ok(gamma_nominal.powf(1.0 / k as f64))
}

/// Nominal discount that yields `gamma_eff` per primitive step.
pub fn nominal_discount(gamma_eff: f64, k: usize) -> Result<f64> {
    check_repeat_discount(gamma_eff, k)?;
    Ok(gamma_eff.powi(k as i32))
}
