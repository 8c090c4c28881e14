//! Exact successor representations for finite reward-free MDPs and their
//! action-repeat variants.
//!
//! The crate is organised bottom-up:
//!
//! * [`mdp`] builds gridworlds, random instances, policies and the
//!   policy-induced transition operators, including the factorization of the
//!   k-step operator into an action-repetition block and a policy block.
//! * [`successor`] computes successor matrices (closed form and truncated
//!   Neumann series), Q-functions, optimal Q-values by value iteration and the
//!   value error introduced by repeating actions.
//! * [`spectral`] holds the singular-value machinery: stable rank, normalized
//!   spectral entropy, rank-d truncation and audits of the singular-value
//!   bounds for k-step successor matrices.
//! * [`fb`] contains tabular forward-backward factorizations: the SVD
//!   optimum, reward embeddings, a bootstrapped trainer and gap reports.
//! * [`harness`] drives reproducible sweeps and writes versioned CSV files.
//!
//! State-action pairs are indexed state-major everywhere: `(s, a)` maps to
//! `s * n_actions + a`.

pub mod error;
pub mod fb;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod spectral;
pub mod successor;

pub use error::{Error, Result};
pub use fb::{
    fb_bellman_error, fb_from_svd, fb_q, fb_td_train, greedy_policy_from_f, optimality_gap_report,
    realization_error, reward_embedding, FbRepresentation, GapReport, PolicyFamily, TrainConfig,
    TrainOutcome,
};
pub use mdp::{
    build_gridworld, commutation_matrix, parse_layout, policy_operator, random_mdp,
    repeat_mdp, repeat_operator, GridLayout, MdpClass, Permutation, Policy, PolicyOperator,
    TabularMdp,
};
pub use spectral::{
    audit_bounds, nse_dominant_weight_bound, singular_values, spectral_entropy,
    srank_upper_bound, stable_rank, sv_upper_bound, truncated_svd, BoundAudit, Regime,
    SpectrumReport,
};
pub use successor::{
    effective_discount, nominal_discount, optimal_q, q_from_sr, repeat_value_error,
    sr_closed_form, sr_neumann, RewardTask, SrSource, SuccessorMatrix,
};
