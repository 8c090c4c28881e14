//! Singular-value metrics, rank-d truncation and bound audits for k-step
//! successor matrices.
//!
//! The audit evaluates the chain
//!
//! ```text
//! σ_i(M̃) ≤ 1/(1 − γ σ_i(P̃))          operator chain
//!        ≤ 1/(1 − γ σ_i(P_rep^k))     repeat chain, σ(P_rep^k) = ∪_a σ(P_a^k)
//!        ≤ 1/(1 − γ σ_i(P_rep)^k)     power chain
//! ```
//!
//! together with the stable-rank upper bound and the dominant-weight lower
//! bound that follow from it. A record is asserted (`Regime::Proven`) only when
//! its derivation applies to the instance: every per-action matrix must have
//! unit spectral norm, the power step additionally needs normal per-action
//! matrices, and the two aggregate bounds need `σ_1(P̃) = 1` and `ρ < 1`.
//! Everything else is recorded as a finding.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs_diff, normality_defect, singular_values_only, spectral_norm, SortedSvd};
use crate::mdp::{check_discount, repeat_operator, repeated_transitions, Policy, TabularMdp};
use crate::successor::sr_closed_form;

/// Relative threshold below which singular values count as zero in the entropy.
pub const ENTROPY_CLAMP: f64 = 1e-12;
/// Tolerance of the `lhs ≤ rhs` test in audits.
pub const BOUND_TOL: f64 = 1e-8;
/// Slack on `σ_1(P_a) ≤ 1` for the proven regime.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub beta: usize,
    pub energy_weights: Vec<f64>,
    pub stable_rank: Option<f64>,
    pub nse: Option<f64>,
    /// Set when `β = 1`, where the entropy normalizer vanishes.
    pub nse_degenerate: bool,
}

impl SpectrumReport {
    /// Builds a report from raw singular values (sorted here) and fills the
    /// metrics when the spectrum is not identically zero.
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("empty spectrum".into()));
        }
        if values.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument(
                "singular values must be finite and non-negative".into(),
            ));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let energy: f64 = values.iter().map(|s| s * s).sum();
        let energy_weights = if energy > 0.0 {
            values.iter().map(|s| s * s / energy).collect()
        } else {
            vec![0.0; values.len()]
        };
        let mut report = SpectrumReport {
            beta: values.len(),
            singular_values: values,
            energy_weights,
            stable_rank: None,
            nse: None,
            nse_degenerate: false,
        };
        if report.sigma1() > 0.0 {
            report.stable_rank = Some(stable_rank(&report)?);
            let entropy = spectral_entropy(&report)?;
            report.nse = Some(entropy.value);
            report.nse_degenerate = entropy.degenerate;
        }
        Ok(report)
    }

    pub fn sigma1(&self) -> f64 {
        self.singular_values[0]
    }

    /// `σ_{i+1}` in one-based terms; zero past the end of the spectrum.
    pub fn sigma(&self, index: usize) -> f64 {
        self.singular_values.get(index).copied().unwrap_or(0.0)
    }

    pub fn head(&self, n: usize) -> &[f64] {
        &self.singular_values[..n.min(self.beta)]
    }
}

/// Full spectrum via a reconstruction-checked SVD:
/// `‖U·Σ·Vᵀ − M‖_max ≤ 1e−7·σ_1`.
pub fn singular_values(matrix: &DMatrix<f64>) -> Result<SpectrumReport> {
    let svd = SortedSvd::compute(matrix)?;
    let s1 = svd.singular_values.first().copied().unwrap_or(0.0);
    let err = max_abs_diff(&svd.reconstruct(svd.singular_values.len()), matrix);
    if err > 1e-7 * s1 {
        return Err(Error::SvdConvergence);
    }
    SpectrumReport::from_values(svd.singular_values)
}

/// `Σσ_i² / σ_1²`.
pub fn stable_rank(report: &SpectrumReport) -> Result<f64> {
    let s1 = report.sigma1();
    if s1 <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    Ok(report
        .singular_values
        .iter()
        .map(|s| (s / s1) * (s / s1))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entropy {
    pub value: f64,
    pub degenerate: bool,
}

/// `−Σ p_i log p_i / log β` with `p_i = σ_i²/Σσ_j²`. For `β = 1` the value is
/// 0 and flagged degenerate.
pub fn spectral_entropy(report: &SpectrumReport) -> Result<Entropy> {
    let s1 = report.sigma1();
    if s1 <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    if report.beta == 1 {
        return Ok(Entropy {
            value: 0.0,
            degenerate: true,
        });
    }
    let clamped: Vec<f64> = report
        .singular_values
        .iter()
        .map(|&s| if s < ENTROPY_CLAMP * s1 { 0.0 } else { s / s1 })
        .collect();
    let energy: f64 = clamped.iter().map(|s| s * s).sum();
    let h: f64 = clamped
        .iter()
        .filter(|s| **s > 0.0)
        .map(|s| {
            let p = s * s / energy;
            -p * p.ln()
        })
        .sum();
    Ok(Entropy {
        value: (h / (report.beta as f64).ln()).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Rank-d truncation of a matrix.
#[derive(Debug, Clone)]
pub struct Truncation {
    pub approx: DMatrix<f64>,
    /// Measured `‖M − M_d‖_2`.
    pub error: f64,
    /// `σ_{d+1}`, zero when `d` reaches the spectrum size.
    pub sigma_next: f64,
    /// `U_d·√Σ_d`.
    pub forward: DMatrix<f64>,
    /// `V_d·√Σ_d`.
    pub backward: DMatrix<f64>,
}

pub fn truncated_svd(matrix: &DMatrix<f64>, d: usize) -> Result<Truncation> {
    let svd = SortedSvd::compute(matrix)?;
    let beta = svd.singular_values.len();
    if d == 0 || d > beta {
        return Err(Error::InvalidArgument(format!(
            "rank {d} outside 1..={beta}"
        )));
    }
    let mut forward = svd.u.columns(0, d).into_owned();
    let mut backward = svd.v.columns(0, d).into_owned();
    for j in 0..d {
        let root = svd.singular_values[j].sqrt();
        forward.column_mut(j).scale_mut(root);
        backward.column_mut(j).scale_mut(root);
    }
    let approx = &forward * backward.transpose();
    let error = spectral_norm(&(matrix - &approx))?;
    Ok(Truncation {
        approx,
        error,
        sigma_next: svd.singular_values.get(d).copied().unwrap_or(0.0),
        forward,
        backward,
    })
}

/// A bound value, `+∞` when its denominator is not positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundValue {
    pub value: f64,
    pub vacuous: bool,
}

impl BoundValue {
    fn from_denominator(denominator: f64) -> Self {
        if denominator > 0.0 {
            BoundValue {
                value: 1.0 / denominator,
                vacuous: false,
            }
        } else {
            BoundValue {
                value: f64::INFINITY,
                vacuous: true,
            }
        }
    }
}

/// `1 / (1 − γ·σ_i^k)` for the `index`-th (0-based) entry of a spectrum.
pub fn sv_upper_bound(spectrum: &[f64], gamma: f64, k: usize, index: usize) -> Result<BoundValue> {
    check_discount(gamma)?;
    if k == 0 {
        return Err(Error::ZeroRepeat);
    }
    let sigma = spectrum.get(index).copied().ok_or_else(|| {
        Error::InvalidArgument(format!("index {index} outside spectrum of {}", spectrum.len()))
    })?;
    Ok(BoundValue::from_denominator(1.0 - gamma * sigma.powi(k as i32)))
}

fn concentration_ratio(sigma1_p: f64, rho: f64, gamma: f64, k: usize, cardinality: usize) -> Result<f64> {
    check_discount(gamma)?;
    if k == 0 {
        return Err(Error::ZeroRepeat);
    }
    if cardinality == 0 {
        return Err(Error::InvalidArgument("cardinality must be positive".into()));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Assumption(format!("ρ = {rho} is not in [0, 1)")));
    }
    if sigma1_p < 0.0 || gamma * sigma1_p >= 1.0 {
        return Err(Error::Assumption(format!(
            "γσ_1 = {} is not below 1",
            gamma * sigma1_p
        )));
    }
    let ratio = (1.0 - gamma * sigma1_p) / (1.0 - gamma * rho.powi(k as i32));
    Ok((cardinality - 1) as f64 * ratio * ratio)
}

/// `1 + (card − 1)·((1 − γσ_1)/(1 − γρ^k))²`, non-increasing in `k`.
pub fn srank_upper_bound(
    sigma1_p: f64,
    rho: f64,
    gamma: f64,
    k: usize,
    cardinality: usize,
) -> Result<f64> {
    Ok(1.0 + concentration_ratio(sigma1_p, rho, gamma, k, cardinality)?)
}

/// Lower bound on the dominant energy weight `p_1`:
/// `1 / (1 + (card − 1)·((1 − γσ_1)/(1 − γρ^k))²)`, non-decreasing in `k`.
pub fn nse_dominant_weight_bound(
    sigma1_p: f64,
    rho: f64,
    gamma: f64,
    k: usize,
    cardinality: usize,
) -> Result<f64> {
    Ok(1.0 / (1.0 + concentration_ratio(sigma1_p, rho, gamma, k, cardinality)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "proven_regime")]
    Proven,
    #[serde(rename = "heuristic_regime")]
    Heuristic,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Proven => "proven_regime",
            Regime::Heuristic => "heuristic_regime",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// `σ_i(M̃) ≤ 1/(1 − γσ_i(P̃))`.
    OperatorChain,
    /// `σ_i(M̃) ≤ 1/(1 − γσ_i(P_rep^k))`.
    RepeatChain,
    /// `σ_i(M̃) ≤ 1/(1 − γσ_i(P_rep)^k)`.
    PowerChain,
    /// Stable rank with cardinality `|S·A|`.
    StableRank,
    /// Stable rank with cardinality `|S|`.
    StableRankStates,
    /// Dominant weight lower bound (`lhs` = bound, `rhs` = measured `p_1`).
    DominantWeight,
    DominantWeightStates,
}

impl BoundKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundKind::OperatorChain => "operator_chain",
            BoundKind::RepeatChain => "repeat_chain",
            BoundKind::PowerChain => "power_chain",
            BoundKind::StableRank => "stable_rank",
            BoundKind::StableRankStates => "stable_rank_states",
            BoundKind::DominantWeight => "dominant_weight",
            BoundKind::DominantWeightStates => "dominant_weight_states",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub bound: BoundKind,
    pub i: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub satisfied: bool,
    pub regime: Regime,
    pub vacuous: bool,
}

impl BoundRecord {
    fn new(bound: BoundKind, i: usize, lhs: f64, rhs: BoundValue, regime: Regime) -> Self {
        BoundRecord {
            bound,
            i,
            lhs,
            rhs: rhs.value,
            slack: rhs.value - lhs,
            satisfied: lhs <= rhs.value + BOUND_TOL,
            regime,
            vacuous: rhs.vacuous,
        }
    }

    pub fn is_violation(&self) -> bool {
        !self.satisfied && self.regime == Regime::Proven
    }

    pub fn is_finding(&self) -> bool {
        !self.satisfied && self.regime == Regime::Heuristic
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundAudit {
    pub records: Vec<BoundRecord>,
    /// Instance class: proven when every `P_a` has unit spectral norm.
    pub assumption_class: Regime,
    /// Sub-dominant cap: `ρ^k = σ_2(P̃)`.
    pub rho: f64,
    pub sigma1_ptilde: f64,
    pub normal_actions: bool,
    pub d: usize,
    pub sr_spectrum: SpectrumReport,
}

pub const AUDIT_CSV_HEADER: [&str; 8] = ["bound", "i", "lhs", "rhs", "slack", "satisfied", "regime", "vacuous"];

impl BoundAudit {
    pub fn violations(&self) -> impl Iterator<Item = &BoundRecord> {
        self.records.iter().filter(|r| r.is_violation())
    }

    pub fn findings(&self) -> impl Iterator<Item = &BoundRecord> {
        self.records.iter().filter(|r| r.is_finding())
    }

    /// No asserted record is violated.
    pub fn passed(&self) -> bool {
        self.violations().next().is_none()
    }

    pub fn records_of(&self, kind: BoundKind) -> impl Iterator<Item = &BoundRecord> {
        self.records.iter().filter(move |r| r.bound == kind)
    }

    /// The power-chain record at index `d`, which bounds `σ_{d+1}(M̃)`.
    pub fn truncation_term(&self) -> Option<&BoundRecord> {
        self.records_of(BoundKind::PowerChain).find(|r| r.i == self.d)
    }

    pub fn csv_fields(record: &BoundRecord) -> [String; 8] {
        [
            record.bound.as_str().to_string(),
            record.i.to_string(),
            record.lhs.to_string(),
            record.rhs.to_string(),
            record.slack.to_string(),
            record.satisfied.to_string(),
            record.regime.as_str().to_string(),
            record.vacuous.to_string(),
        ]
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(AUDIT_CSV_HEADER)?;
        for r in &self.records {
            w.write_record(Self::csv_fields(r))?;
        }
        w.flush().map_err(|e| Error::io("<audit csv>", e))?;
        Ok(())
    }
}

/// Sorted union of `σ(P_a^k)` over actions, `|S·A|` values.
pub fn repeat_union_spectrum(mdp: &TabularMdp, k: usize) -> Result<Vec<f64>> {
    union_spectrum(&repeated_transitions(mdp, k)?)
}

fn union_spectrum(mats: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let mut all = Vec::new();
    for m in mats {
        all.extend(singular_values_only(m)?);
    }
    all.sort_by(|a, b| b.total_cmp(a));
    Ok(all)
}

/// Audits every singular-value bound on `M̃ = (I − γP̃)⁻¹` for the k-step
/// operator of `policy`.
pub fn audit_bounds(
    mdp: &TabularMdp,
    policy: &Policy,
    gamma: f64,
    k: usize,
    d: usize,
) -> Result<BoundAudit> {
    let op = repeat_operator(mdp, policy, k)?;
    let sr = sr_closed_form(&op, gamma)?;
    let n = op.n_pairs();
    if d > n {
        return Err(Error::InvalidArgument(format!("rank {d} exceeds {n}")));
    }
    let sr_spectrum = singular_values(&sr.m)?;
    let sm = &sr_spectrum.singular_values;
    let sp = singular_values_only(&op.p_pi)?;
    let one_step = union_spectrum(mdp.transitions())?;
    let k_step = repeat_union_spectrum(mdp, k)?;

    let unit_norm = mdp
        .transitions()
        .iter()
        .all(|p| one_step_norm(p) <= 1.0 + UNIT_NORM_TOL);
    let normal_actions = mdp
        .transitions()
        .iter()
        .all(|p| normality_defect(p) <= UNIT_NORM_TOL);
    let assumption_class = if unit_norm { Regime::Proven } else { Regime::Heuristic };
    let gate = |ok: bool| if ok { Regime::Proven } else { Regime::Heuristic };

    let mut records = Vec::with_capacity(3 * n + 4);
    for i in 0..n {
        records.push(BoundRecord::new(
            BoundKind::OperatorChain,
            i,
            sm[i],
            BoundValue::from_denominator(1.0 - gamma * sp[i]),
            gate(unit_norm),
        ));
        records.push(BoundRecord::new(
            BoundKind::RepeatChain,
            i,
            sm[i],
            BoundValue::from_denominator(1.0 - gamma * k_step[i]),
            gate(unit_norm),
        ));
        records.push(BoundRecord::new(
            BoundKind::PowerChain,
            i,
            sm[i],
            sv_upper_bound(&one_step, gamma, k, i)?,
            gate(unit_norm && normal_actions),
        ));
    }

    let sigma1_ptilde = sp[0];
    let sigma2_ptilde = sp.get(1).copied().unwrap_or(0.0);
    let rho = sigma2_ptilde.powf(1.0 / k as f64);
    let aggregate_ok = unit_norm && (sigma1_ptilde - 1.0).abs() <= UNIT_NORM_TOL && rho < 1.0;
    let srank = sr_spectrum.stable_rank.ok_or(Error::ZeroSpectrum)?;
    let p1 = sr_spectrum.energy_weights[0];
    for (card, srank_kind, weight_kind, regime) in [
        (n, BoundKind::StableRank, BoundKind::DominantWeight, gate(aggregate_ok)),
        (
            mdp.n_states(),
            BoundKind::StableRankStates,
            BoundKind::DominantWeightStates,
            Regime::Heuristic,
        ),
    ] {
        let (srank_rhs, weight_lhs) = match (
            srank_upper_bound(sigma1_ptilde, rho, gamma, k, card),
            nse_dominant_weight_bound(sigma1_ptilde, rho, gamma, k, card),
        ) {
            (Ok(s), Ok(w)) => (
                BoundValue {
                    value: s,
                    vacuous: false,
                },
                w,
            ),
            _ => (
                BoundValue {
                    value: f64::INFINITY,
                    vacuous: true,
                },
                0.0,
            ),
        };
        records.push(BoundRecord::new(srank_kind, 0, srank, srank_rhs, regime));
        records.push(BoundRecord::new(
            weight_kind,
            0,
            weight_lhs,
            BoundValue {
                value: p1,
                vacuous: srank_rhs.vacuous,
            },
            regime,
        ));
    }

    Ok(BoundAudit {
        records,
        assumption_class,
        rho,
        sigma1_ptilde,
        normal_actions,
        d,
        sr_spectrum,
    })
}

fn one_step_norm(p: &DMatrix<f64>) -> f64 {
    spectral_norm(p).unwrap_or(f64::INFINITY)
}
