//! Robust control toolkit: entropy-regularized robust and soft-robust
//! reinforcement learning at two scales.
//!
//! The tabular layer ([`mdp`]) implements worst-case, average-model, and
//! nominal Bellman operators with an optional KL penalty toward a reference
//! policy, plus exact solvers used as ground truth. The continuous layer
//! builds the same objectives into actor-critic training: deterministic
//! physics environments ([`envs`]), a small reverse-mode autodiff stack
//! ([`nn`]), worst-case TD targets ([`policy_eval`]), and two trainers
//! ([`mpo`], [`svg`]). Uncertainty sets are either perturbed physics models
//! or models fit from offline data ([`ddr`]). The [`harness`] module wires
//! configurations, seeded runs, evaluation, and batch studies together for
//! the `robust-ctrl` binary.
//!
//! Everything downstream of a seed is deterministic: identical configuration
//! and seed reproduce identical result files.

pub mod ddr;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod mpo;
pub mod nn;
pub mod policy_eval;
pub mod rng;
pub mod spec;
pub mod svg;
pub mod trainer;

pub use error::CoreError;
pub use spec::{Objective, RobustnessMode, RobustnessSpec};
