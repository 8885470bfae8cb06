//! Tabular MDPs with finite uncertainty sets and KL-regularized Bellman
//! operators.
//!
//! An uncertainty set is a finite list of transition kernels with a weight
//! vector. Operators come in three modes: worst case over kernels (the
//! minimum is taken per state-action pair), weighted average kernel, and
//! nominal (kernel 0). With a positive `tau` the backed-up value charges
//! `tau * log(pi/pi_ref)` against a reference policy; `tau = 0` recovers the
//! unregularized operators exactly.
//!
//! All operators are gamma-contractions in the sup norm, which the exact
//! solvers in [`solve`] rely on.

mod bellman;
mod json;
mod solve;
mod types;

pub use bellman::{bellman_apply, optimal_bellman_apply};
pub use json::{load_mdp_json, save_mdp_json, MdpDocument};
pub use solve::{
    policy_evaluate_exact, value_iteration, value_iteration_from, vi_error_bound,
    FixedPointResult, DEFAULT_TOL,
};
pub use types::{RegularizationSpec, TabularMdp, TabularPolicy, UncertaintySet, ValueFunction};
