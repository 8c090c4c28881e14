//! Tabular forward-backward factorizations of the successor matrix.
//!
//! `F_z·Bᵀ ≈ M̃` with one forward table per z-anchor and a shared backward
//! table. Rewards embed as `z_R = Bᵀr` and `Q̂ = F_z·z_R`.
//!
//! The trainer bootstraps against frozen copies `F̄, B̄` refreshed every
//! `target_period` steps. `F` descends the forward residual
//! `F·Bᵀ − I − γP̃·F̄·B̄ᵀ`; `B` descends the backward residual
//! `F·Bᵀ − I − γ·F̄·(P̃ᵀB̄)ᵀ`, which shares the fixed point because
//! `M̃ = I + γM̃P̃`. Both steps are right-preconditioned by the inverse Gram
//! matrix of the other factor, so the `F` step relaxes towards the ridge
//! least-squares fit, and `B` is pulled towards `BᵀB/N = I`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, singular_values_only, spectral_norm, sup_norm};
use crate::mdp::{check_discount, repeat_operator, Policy, PolicyOperator, TabularMdp};
use crate::spectral::{repeat_union_spectrum, truncated_svd};
use crate::successor::{
    greedy_policy, optimal_q, repeat_value_error, sr_closed_form, RewardTask, SrSource,
    SuccessorMatrix, VALUE_ITERATION_CAP,
};

/// Value-iteration tolerance used by gap reports.
pub const GAP_VI_TOL: f64 = 1e-10;
/// Ridge added to Gram preconditioners.
const GRAM_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FbRepresentation {
    /// One `|S·A| × d` table per anchor.
    pub forward: Vec<DMatrix<f64>>,
    pub backward: DMatrix<f64>,
    pub anchors: Vec<DVector<f64>>,
    pub d: usize,
    pub n_actions: usize,
}

impl FbRepresentation {
    pub fn new(
        forward: Vec<DMatrix<f64>>,
        backward: DMatrix<f64>,
        anchors: Vec<DVector<f64>>,
        n_actions: usize,
    ) -> Result<Self> {
        let d = backward.ncols();
        let n = backward.nrows();
        if d == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be at least 1".into()));
        }
        if n_actions == 0 || !n.is_multiple_of(n_actions) {
            return Err(Error::Dimension(format!(
                "{n} rows do not split into {n_actions} actions"
            )));
        }
        if forward.is_empty() || forward.len() != anchors.len() {
            return Err(Error::Dimension(format!(
                "{} forward tables for {} anchors",
                forward.len(),
                anchors.len()
            )));
        }
        for f in &forward {
            if f.shape() != (n, d) {
                return Err(Error::Dimension(format!(
                    "forward table is {:?}, expected ({n}, {d})",
                    f.shape()
                )));
            }
            ensure_finite(f)?;
        }
        if anchors.iter().any(|z| z.len() != d || z.iter().any(|x| !x.is_finite())) {
            return Err(Error::Dimension(format!("anchors must be finite {d}-vectors")));
        }
        ensure_finite(&backward)?;
        Ok(FbRepresentation {
            forward,
            backward,
            anchors,
            d,
            n_actions,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.backward.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.n_pairs() / self.n_actions
    }

    pub fn forward(&self, z_index: usize) -> Result<&DMatrix<f64>> {
        self.forward.get(z_index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "anchor {z_index} out of range ({} anchors)",
                self.forward.len()
            ))
        })
    }

    /// `M̂ = F_z·Bᵀ`.
    pub fn approx(&self, z_index: usize) -> Result<DMatrix<f64>> {
        Ok(self.forward(z_index)? * self.backward.transpose())
    }

    pub fn as_successor(&self, z_index: usize, gamma: f64, repeat_k: usize) -> Result<SuccessorMatrix> {
        Ok(SuccessorMatrix {
            m: self.approx(z_index)?,
            gamma,
            repeat_k,
            source: SrSource::FbFactorized,
        })
    }

    /// Index of the anchor closest to `z` in Euclidean distance.
    pub fn nearest_anchor(&self, z: &DVector<f64>) -> Result<usize> {
        check_len(z.len(), self.d, "z")?;
        Ok(nearest(&self.anchors, z))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fb: FbRepresentation = serde_json::from_str(&text)?;
        FbRepresentation::new(fb.forward, fb.backward, fb.anchors, fb.n_actions)
    }
}

fn nearest(anchors: &[DVector<f64>], z: &DVector<f64>) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, a) in anchors.iter().enumerate() {
        let dist = (a - z).norm_squared();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    best
}

fn check_len(got: usize, expected: usize, what: &str) -> Result<()> {
    if got != expected {
        return Err(Error::Dimension(format!("{what} has length {got}, expected {expected}")));
    }
    Ok(())
}

/// Rank-d SVD factorization with balanced `√σ` scaling and the single anchor
/// `√d·e_1`.
pub fn fb_from_svd(sr: &SuccessorMatrix, d: usize, n_actions: usize) -> Result<FbRepresentation> {
    let t = truncated_svd(&sr.m, d)?;
    let mut anchor = DVector::zeros(d);
    anchor[0] = (d as f64).sqrt();
    FbRepresentation::new(vec![t.forward], t.backward, vec![anchor], n_actions)
}

/// `‖F_z·Bᵀ − M‖_2 − σ_{d+1}(M)`.
pub fn realization_error(fb: &FbRepresentation, z_index: usize, sr_true: &SuccessorMatrix) -> Result<f64> {
    if sr_true.m.shape() != (fb.n_pairs(), fb.n_pairs()) {
        return Err(Error::Dimension(format!(
            "SR is {:?}, representation has {} pairs",
            sr_true.m.shape(),
            fb.n_pairs()
        )));
    }
    let err = spectral_norm(&(fb.approx(z_index)? - &sr_true.m))?;
    let sigma = singular_values_only(&sr_true.m)?;
    Ok(err - sigma.get(fb.d).copied().unwrap_or(0.0))
}

/// `z_R = Bᵀ·r`.
pub fn reward_embedding(fb: &FbRepresentation, task: &RewardTask) -> Result<DVector<f64>> {
    check_len(task.r.len(), fb.n_pairs(), "reward")?;
    Ok(fb.backward.transpose() * &task.r)
}

/// `Q̂ = F_z·z`.
pub fn fb_q(fb: &FbRepresentation, z_index: usize, z: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(z.len(), fb.d, "z")?;
    Ok(fb.forward(z_index)? * z)
}

/// `π_z(s) = argmax_a F_z(s,a)ᵀz`, lowest index on ties.
pub fn greedy_policy_from_f(fb: &FbRepresentation, z_index: usize, z: &DVector<f64>) -> Result<Policy> {
    greedy_policy(&fb_q(fb, z_index, z)?, fb.n_states(), fb.n_actions)
}

/// `‖F_z·Bᵀ − I − γ·P̃·F_z·Bᵀ‖_F / |S·A|`.
pub fn fb_bellman_error(fb: &FbRepresentation, z_index: usize, op: &PolicyOperator, gamma: f64) -> Result<f64> {
    if op.n_pairs() != fb.n_pairs() {
        return Err(Error::Dimension(format!(
            "operator has {} pairs, representation has {}",
            op.n_pairs(),
            fb.n_pairs()
        )));
    }
    let f = fb.forward(z_index)?;
    Ok(bellman_error_of(f, &fb.backward, &op.p_pi, gamma))
}

fn bellman_error_of(f: &DMatrix<f64>, b: &DMatrix<f64>, p_pi: &DMatrix<f64>, gamma: f64) -> f64 {
    let n = f.nrows();
    let lhs = f - p_pi * f * gamma;
    let mut r = lhs * b.transpose();
    for i in 0..n {
        r[(i, i)] -= 1.0;
    }
    r.norm() / n as f64
}

/// How each anchor's training policy is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFamily {
    /// Uniform over actions for every anchor.
    Uniform,
    /// `π_z` greedy with respect to the frozen `F̄_z·z`.
    Greedy,
    /// Greedy mixed with `eps` of the uniform policy.
    EpsilonGreedy { eps: f64 },
}

impl PolicyFamily {
    fn policy_for(&self, f_target: &DMatrix<f64>, z: &DVector<f64>, ns: usize, na: usize) -> Result<Policy> {
        match *self {
            PolicyFamily::Uniform => Ok(Policy::uniform(ns, na)),
            PolicyFamily::Greedy => greedy_policy(&(f_target * z), ns, na),
            PolicyFamily::EpsilonGreedy { eps } => {
                Ok(greedy_policy(&(f_target * z), ns, na)?.mix_uniform(eps))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    /// Discount per macro-step of the repeat MDP.
    pub gamma: f64,
    pub k: usize,
    pub steps: usize,
    pub lr_forward: f64,
    pub lr_backward: f64,
    pub ortho_coef: f64,
    pub target_period: usize,
    /// Steps between anchor resamples.
    pub hold_steps: usize,
    /// Anchors drawn per resample: half from the dictionary, half from the
    /// sphere snapped to the nearest dictionary entry.
    pub z_batch: usize,
    pub n_dictionary: usize,
    pub policy: PolicyFamily,
    pub seed: u64,
    pub divergence_threshold: f64,
    /// Steps between Bellman-error evaluations of anchor 0.
    pub bellman_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 100,
            gamma: 0.95,
            k: 1,
            steps: 10_000,
            lr_forward: 0.5,
            lr_backward: 0.05,
            ortho_coef: 1.0,
            target_period: 100,
            hold_steps: 10,
            z_batch: 2,
            n_dictionary: 4,
            policy: PolicyFamily::Uniform,
            seed: 0,
            divergence_threshold: 1e6,
            bellman_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_discount(self.gamma)?;
        if self.k == 0 {
            return Err(Error::ZeroRepeat);
        }
        let positive = [
            ("d", self.d),
            ("steps", self.steps),
            ("target_period", self.target_period),
            ("hold_steps", self.hold_steps),
            ("z_batch", self.z_batch),
            ("n_dictionary", self.n_dictionary),
            ("bellman_every", self.bellman_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("lr_forward", self.lr_forward), ("lr_backward", self.lr_backward)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.ortho_coef >= 0.0 && self.ortho_coef.is_finite()) {
            return Err(Error::InvalidArgument("ortho_coef must be non-negative".into()));
        }
        if let PolicyFamily::EpsilonGreedy { eps } = self.policy {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::InvalidArgument(format!("eps {eps} outside [0, 1]")));
            }
        }
        if self.divergence_threshold.is_nan() || self.divergence_threshold <= 0.0 {
            return Err(Error::InvalidArgument("divergence_threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTraces {
    /// Loss before each update, one entry per step.
    pub loss: Vec<f64>,
    /// `(step, error)` of anchor 0; step 0 is the initialization.
    pub bellman: Vec<(usize, f64)>,
}

impl TrainTraces {
    pub fn initial_bellman(&self) -> Option<f64> {
        self.bellman.first().map(|p| p.1)
    }

    pub fn final_bellman(&self) -> Option<f64> {
        self.bellman.last().map(|p| p.1)
    }

    pub fn write_loss_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "loss"])?;
        for (i, l) in self.loss.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<loss csv>", e))
    }

    pub fn write_bellman_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "bellman_error"])?;
        for (step, e) in &self.bellman {
            w.write_record([step.to_string(), e.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<bellman csv>", e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub fb: FbRepresentation,
    pub traces: TrainTraces,
    /// Training policy of anchor 0 at the end of training.
    pub policy: Policy,
    pub config: TrainConfig,
}

impl TrainOutcome {
    /// Exact k-step SR of anchor 0's training policy.
    pub fn reference_sr(&self, mdp: &TabularMdp) -> Result<SuccessorMatrix> {
        let op = repeat_operator(mdp, &self.policy, self.config.k)?;
        sr_closed_form(&op, self.config.gamma)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    DMatrix::from_vec(rows, cols, data)
}

fn sphere(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.norm();
        if norm > 1e-12 {
            return v * ((d as f64).sqrt() / norm);
        }
    }
}

/// `π̃·X`: per state, the policy-weighted sum of its action rows.
fn pi_reduce(probs: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (ns, na) = probs.shape();
    DMatrix::from_fn(ns, x.ncols(), |s, j| {
        (0..na).map(|a| probs[(s, a)] * x[(s * na + a, j)]).sum()
    })
}

/// `π̃ᵀ·Y`: row `(s, a)` is `π(a|s)·Y[s]`.
fn pi_lift(probs: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let na = probs.ncols();
    DMatrix::from_fn(probs.nrows() * na, y.ncols(), |i, j| {
        probs[(i / na, i % na)] * y[(i / na, j)]
    })
}

fn trace_product(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    x.component_mul(&y.transpose()).sum()
}

/// `(scale·X + ridge·I)⁻¹` for symmetric positive semi-definite `X`, as
/// `L⁻ᵀL⁻¹` from the Cholesky factor.
fn gram_inverse(x: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let d = x.nrows();
    let a = x * scale + DMatrix::identity(d, d) * GRAM_RIDGE;
    let l = a
        .cholesky()
        .ok_or_else(|| Error::Solve("Gram preconditioner is not positive definite".into()))?
        .unpack();
    // Row i of L is column i of Lᵀ, which is contiguous.
    let lt = l.transpose();
    let mut inv = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        inv[(j, j)] = 1.0 / lt[(j, j)];
        for i in j + 1..d {
            let row = lt.column(i);
            let col = inv.column(j);
            let acc: f64 = (j..i).map(|k| row[k] * col[k]).sum();
            inv[(i, j)] = -acc / lt[(i, i)];
        }
    }
    Ok(inv.transpose() * inv)
}

/// `Aᵀ·B` through the blocked product, which is much faster than `tr_mul`.
fn cross(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * b
}

/// Row-compressed copy of a mostly-zero matrix.
struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
    ncols: usize,
}

impl SparseRows {
    fn from_dense(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter(|&j| m[(i, j)] != 0.0)
                    .map(|j| (j, m[(i, j)]))
                    .collect()
            })
            .collect();
        SparseRows {
            rows,
            ncols: m.ncols(),
        }
    }

    /// `self·X`.
    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows.len(), x.ncols());
        for j in 0..x.ncols() {
            let col = x.column(j);
            for (i, row) in self.rows.iter().enumerate() {
                out[(i, j)] = row.iter().map(|&(c, v)| v * col[c]).sum();
            }
        }
        out
    }

    /// `selfᵀ·X`.
    fn tr_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols, x.ncols());
        for j in 0..x.ncols() {
            for (i, row) in self.rows.iter().enumerate() {
                let xi = x[(i, j)];
                for &(c, v) in row {
                    out[(c, j)] += v * xi;
                }
            }
        }
        out
    }
}

struct Anchor {
    z: DVector<f64>,
    f: DMatrix<f64>,
    /// `F̄ᵀ`, fixed between refreshes.
    f_target_t: DMatrix<f64>,
    probs: DMatrix<f64>,
    /// `γ·P_rep^k·π̃·F̄`, fixed between refreshes.
    g: DMatrix<f64>,
    g_gram: DMatrix<f64>,
    /// `γ·π̃ᵀ·(P_rep^k)ᵀ·B̄`, fixed between refreshes.
    h: DMatrix<f64>,
}

/// Bootstrapped FB training on the k-repeat operator with discount
/// `config.gamma` per macro-step. Deterministic given the config.
pub fn fb_td_train(mdp: &TabularMdp, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n = ns * na;
    let nf = n as f64;
    let d = config.d;
    let gamma = config.gamma;
    let (lr_f, lr_b) = (config.lr_forward, config.lr_backward);
    let p_rep = SparseRows::from_dense(&repeat_operator(mdp, &Policy::uniform(ns, na), config.k)?.p_rep_k);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let dictionary: Vec<DVector<f64>> = (0..config.n_dictionary).map(|_| sphere(&mut rng, d)).collect();
    let mut anchors: Vec<Anchor> = dictionary
        .iter()
        .map(|z| Anchor {
            z: z.clone(),
            f: gaussian(&mut rng, n, d, 1.0 / (d as f64).sqrt()),
            f_target_t: DMatrix::zeros(d, n),
            probs: DMatrix::zeros(ns, na),
            g: DMatrix::zeros(n, d),
            g_gram: DMatrix::zeros(d, d),
            h: DMatrix::zeros(n, d),
        })
        .collect();
    let mut b = gaussian(&mut rng, n, d, 1.0);
    let mut b_target = b.clone();
    let mut b_target_t = DMatrix::zeros(d, n);
    let mut b_target_gram = DMatrix::zeros(d, d);
    let mut p_anchor0 = DMatrix::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut traces = TrainTraces::default();
    let identity = DMatrix::<f64>::identity(d, d);

    // Workspace reused across steps.
    let mut b_t = DMatrix::zeros(d, n);
    let mut f_t = DMatrix::zeros(d, n);
    let mut tmp = DMatrix::zeros(n, d);
    let mut b_a3 = DMatrix::zeros(n, d);
    let mut grad_b = DMatrix::zeros(n, d);
    let mut btb = DMatrix::zeros(d, d);
    let mut bt_cross = DMatrix::zeros(d, d);
    let mut ftf = DMatrix::zeros(d, d);
    let mut ftg = DMatrix::zeros(d, d);
    let mut target_cross = DMatrix::zeros(d, d);
    let mut ftf_sum = DMatrix::zeros(d, d);

    for t in 0..config.steps {
        if t % config.target_period == 0 {
            b_target.copy_from(&b);
            b_target.transpose_to(&mut b_target_t);
            b_target_gram.gemm(1.0, &b_target_t, &b_target, 0.0);
            let h_state = p_rep.tr_mul(&b_target) * gamma;
            for (i, anchor) in anchors.iter_mut().enumerate() {
                anchor.f.transpose_to(&mut anchor.f_target_t);
                let policy = config.policy.policy_for(&anchor.f, &anchor.z, ns, na)?;
                if i == 0 {
                    p_anchor0 = repeat_operator(mdp, &policy, config.k)?.p_pi;
                }
                anchor.probs = policy.probs().clone();
                anchor.g = p_rep.mul(&pi_reduce(&anchor.probs, &anchor.f)) * gamma;
                anchor.g_gram = cross(&anchor.g, &anchor.g);
                anchor.h = pi_lift(&anchor.probs, &h_state);
            }
            if t == 0 {
                traces
                    .bellman
                    .push((0, bellman_error_of(&anchors[0].f, &b, &p_anchor0, gamma)));
            }
        }
        if t % config.hold_steps == 0 {
            active = sample_active(&mut rng, &dictionary, config.z_batch);
        }

        // F relaxes towards the ridge least-squares fit of F·Bᵀ = I + G·B̄ᵀ:
        // F* = (G·B̄ᵀB + B)·(BᵀB + NεI)⁻¹ = G·A2 + B·A3.
        b.transpose_to(&mut b_t);
        btb.gemm(1.0, &b_t, &b, 0.0);
        bt_cross.gemm(1.0, &b_target_t, &b, 0.0);
        let precond_f = gram_inverse(&btb, 1.0 / nf)?;
        let a2 = &bt_cross * &precond_f / nf;
        let a3 = precond_f / nf;
        b_a3.gemm(1.0, &b, &a3, 0.0);

        grad_b.fill(0.0);
        ftf_sum.fill(0.0);
        let mut residual = 0.0;
        for (i, anchor) in anchors.iter_mut().enumerate() {
            // Every table stays fitted to the current B; the sampled anchors
            // alone drive B.
            if active.binary_search(&i).is_ok() {
                anchor.f.transpose_to(&mut f_t);
                ftf.gemm(1.0, &f_t, &anchor.f, 0.0);
                ftg.gemm(1.0, &f_t, &anchor.g, 0.0);
                residual += trace_product(&ftf, &btb) + nf
                    + trace_product(&anchor.g_gram, &b_target_gram)
                    - 2.0 * anchor.f.dot(&b)
                    - 2.0 * trace_product(&ftg, &bt_cross)
                    + 2.0 * anchor.g.dot(&b_target);
                // (B·FᵀF − H·F̄ᵀF − F)/N
                target_cross.gemm(1.0, &anchor.f_target_t, &anchor.f, 0.0);
                grad_b.gemm(1.0 / nf, &b, &ftf, 1.0);
                grad_b.gemm(-1.0 / nf, &anchor.h, &target_cross, 1.0);
                grad_b.zip_apply(&anchor.f, |g, x| *g -= x / nf);
                ftf_sum += &ftf;
            }
            tmp.copy_from(&b_a3);
            tmp.gemm(1.0, &anchor.g, &a2, 1.0);
            anchor.f.zip_apply(&tmp, |x, u| *x += lr_f * (u - *x));
        }
        let m = active.len() as f64;
        let ortho = &btb / nf - &identity;
        let loss = residual / (m * nf * nf) + config.ortho_coef * ortho.norm_squared();
        traces.loss.push(loss);
        if !loss.is_finite() || loss > config.divergence_threshold {
            return Err(Error::Diverged {
                step: t,
                loss,
                traces: Box::new(traces),
            });
        }
        let precond_b = gram_inverse(&ftf_sum, 1.0 / (m * nf))?;
        tmp.gemm(1.0 / m, &grad_b, &precond_b, 0.0);
        tmp.gemm(config.ortho_coef, &b, &ortho, 1.0);
        b.zip_apply(&tmp, |x, u| *x -= lr_b * u);

        let done = t + 1;
        if done % config.bellman_every == 0 || done == config.steps {
            let e = bellman_error_of(&anchors[0].f, &b, &p_anchor0, gamma);
            if !e.is_finite() {
                return Err(Error::Diverged {
                    step: t,
                    loss: e,
                    traces: Box::new(traces),
                });
            }
            traces.bellman.push((done, e));
        }
    }

    let policy = config.policy.policy_for(&anchors[0].f, &anchors[0].z, ns, na)?;
    let policy = if config.policy == PolicyFamily::Uniform {
        policy
    } else {
        // The reference policy is the one anchor 0 was last trained against.
        Policy::new(anchors[0].probs.clone())?
    };
    let fb = FbRepresentation::new(
        anchors.iter().map(|a| a.f.clone()).collect(),
        b,
        dictionary,
        na,
    )?;
    Ok(TrainOutcome {
        fb,
        traces,
        policy,
        config: config.clone(),
    })
}

fn sample_active(rng: &mut ChaCha8Rng, dictionary: &[DVector<f64>], z_batch: usize) -> Vec<usize> {
    let d = dictionary[0].len();
    let from_dictionary = z_batch.div_ceil(2);
    let mut picked: Vec<usize> = (0..z_batch)
        .map(|j| {
            if j < from_dictionary {
                rng.gen_range(0..dictionary.len())
            } else {
                nearest(dictionary, &sphere(rng, d))
            }
        })
        .collect();
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Gap quantities for one representation on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub d: usize,
    pub k: usize,
    pub gamma: f64,
    pub eps_real: f64,
    pub eps_repeat: f64,
    /// `σ_{d+1}` of the reference SR.
    pub sigma_d_plus_1: f64,
    /// `‖M̂ − M‖_2`.
    pub approx_error: f64,
    /// `2‖r‖_∞/(1−γ)·‖M̂ − M‖_2`.
    pub approx_bound: f64,
    /// `ε_repeat + 2‖r‖_∞/(1−γ)·(ε_real + 1/(1 − γσ_{d+1}))` over the repeat
    /// spectrum; infinite when the denominator is not positive.
    pub decomposed_bound: f64,
    pub decomposed_bound_vacuous: bool,
    pub measured_gap: f64,
    /// `‖(M̂ − M)·r‖_∞`.
    pub certificate_lhs: f64,
    /// `‖M̂ − M‖_2·‖r‖_2`.
    pub certificate_rhs: f64,
}

pub const GAP_CSV_HEADER: [&str; 15] = [
    "d",
    "k",
    "gamma",
    "eps_real",
    "eps_repeat",
    "sigma_d_plus_1",
    "approx_error",
    "approx_bound",
    "decomposed_bound",
    "decomposed_bound_vacuous",
    "measured_gap",
    "certificate_lhs",
    "certificate_rhs",
    "approx_bound_covers",
    "decomposed_bound_covers",
];

impl GapReport {
    pub fn approx_bound_covers(&self) -> bool {
        self.measured_gap <= self.approx_bound + 1e-9
    }

    pub fn decomposed_bound_covers(&self) -> bool {
        self.measured_gap <= self.decomposed_bound + 1e-9
    }

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.d.to_string(),
            self.k.to_string(),
            self.gamma.to_string(),
            self.eps_real.to_string(),
            self.eps_repeat.to_string(),
            self.sigma_d_plus_1.to_string(),
            self.approx_error.to_string(),
            self.approx_bound.to_string(),
            self.decomposed_bound.to_string(),
            self.decomposed_bound_vacuous.to_string(),
            self.measured_gap.to_string(),
            self.certificate_lhs.to_string(),
            self.certificate_rhs.to_string(),
            self.approx_bound_covers().to_string(),
            self.decomposed_bound_covers().to_string(),
        ]
    }
}

/// Per-task quantities shared by every representation evaluated on it.
#[derive(Debug, Clone)]
pub struct GapContext {
    mdp: TabularMdp,
    task: RewardTask,
    k: usize,
    gamma: f64,
    q_star: DVector<f64>,
    eps_repeat: f64,
    repeat_spectrum: Vec<f64>,
}

impl GapContext {
    /// `Q*` and `ε_repeat` are solved with discount `gamma` on the original MDP.
    pub fn new(mdp: &TabularMdp, task: &RewardTask, k: usize, gamma: f64) -> Result<Self> {
        let base = mdp.with_gamma(gamma)?;
        let (q_star, _) = optimal_q(&base, task, GAP_VI_TOL, VALUE_ITERATION_CAP)?;
        let eps_repeat = repeat_value_error(&base, task, k, GAP_VI_TOL)?;
        Ok(GapContext {
            repeat_spectrum: repeat_union_spectrum(mdp, k)?,
            mdp: base,
            task: task.clone(),
            k,
            gamma,
            q_star,
            eps_repeat,
        })
    }

    pub fn report(&self, fb: &FbRepresentation, z_index: usize) -> Result<GapReport> {
        let (ns, na) = (self.mdp.n_states(), self.mdp.n_actions());
        if fb.n_pairs() != ns * na || fb.n_actions != na {
            return Err(Error::Dimension(format!(
                "representation has {} pairs over {} actions, MDP has {}x{}",
                fb.n_pairs(),
                fb.n_actions,
                ns,
                na
            )));
        }
        let r = &self.task.r;
        let z_r = reward_embedding(fb, &self.task)?;
        let q_hat = fb_q(fb, z_index, &z_r)?;
        let policy = greedy_policy(&q_hat, ns, na)?;
        let sr = sr_closed_form(&repeat_operator(&self.mdp, &policy, self.k)?, self.gamma)?;
        let diff = fb.approx(z_index)? - &sr.m;
        let approx_error = spectral_norm(&diff)?;
        let sigma_d_plus_1 = singular_values_only(&sr.m)?.get(fb.d).copied().unwrap_or(0.0);
        let eps_real = approx_error - sigma_d_plus_1;

        let r_sup = sup_norm(r);
        let scale = 2.0 * r_sup / (1.0 - self.gamma);
        let approx_bound = scale * approx_error;
        let sigma_rep = self.repeat_spectrum.get(fb.d).copied().unwrap_or(0.0);
        let denominator = 1.0 - self.gamma * sigma_rep;
        let (decomposed_bound, decomposed_bound_vacuous) = if denominator > 0.0 {
            (self.eps_repeat + scale * (eps_real + 1.0 / denominator), false)
        } else {
            (f64::INFINITY, true)
        };

        let certificate_lhs = sup_norm(&(&diff * r));
        let certificate_rhs = approx_error * r.norm();
        if certificate_lhs > certificate_rhs * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Certificate {
                lhs: certificate_lhs,
                rhs: certificate_rhs,
            });
        }
        Ok(GapReport {
            d: fb.d,
            k: self.k,
            gamma: self.gamma,
            eps_real,
            eps_repeat: self.eps_repeat,
            sigma_d_plus_1,
            approx_error,
            approx_bound,
            decomposed_bound,
            decomposed_bound_vacuous,
            measured_gap: sup_norm(&(q_hat - &self.q_star)),
            certificate_lhs,
            certificate_rhs,
        })
    }
}

/// Gap report of `fb` (anchor `z_index`) on `task`; the certificate
/// `‖(M̂−M)r‖_∞ ≤ ‖M̂−M‖_2‖r‖_2` is enforced.
pub fn optimality_gap_report(
    mdp: &TabularMdp,
    task: &RewardTask,
    fb: &FbRepresentation,
    z_index: usize,
    k: usize,
    gamma: f64,
) -> Result<GapReport> {
    GapContext::new(mdp, task, k, gamma)?.report(fb, z_index)
}
