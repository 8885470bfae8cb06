use ndarray::Array1;

use crate::error::{CoreError, Result};
use crate::spec::RobustnessMode;

use super::bellman::{bellman_apply, optimal_bellman_apply};
use super::types::{RegularizationSpec, TabularMdp, TabularPolicy, UncertaintySet, ValueFunction};

/// Outcome of iterating a Bellman operator to (near) convergence.
///
/// `converged` is false when the iteration budget ran out; callers decide
/// whether that is an error. `residuals[k]` is the sup-norm change of sweep
/// `k`, which decays at least geometrically with ratio `discount`.
#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub values: ValueFunction,
    /// Maximizing policy of the final sweep; `None` for fixed-policy solves.
    pub policy: Option<TabularPolicy>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

fn sup_norm_diff(a: &ValueFunction, b: &ValueFunction) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sup-norm stopping tolerance used when callers have no reason to pick
/// another one.
pub const DEFAULT_TOL: f64 = 1e-8;

/// Value iteration with the optimal operator, from `V = 0`.
pub fn value_iteration(
    mdp: &TabularMdp,
    uset: &UncertaintySet,
    reg: &RegularizationSpec,
    mode: RobustnessMode,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointResult> {
    value_iteration_from(Array1::zeros(mdp.n_states), mdp, uset, reg, mode, tol, max_iters)
}

/// Value iteration from a caller-supplied starting point.
#[allow(clippy::too_many_arguments)]
pub fn value_iteration_from(
    v0: ValueFunction,
    mdp: &TabularMdp,
    uset: &UncertaintySet,
    reg: &RegularizationSpec,
    mode: RobustnessMode,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointResult> {
    if !(tol > 0.0) {
        return Err(CoreError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let mut v = v0;
    let mut residuals = Vec::new();
    let mut policy = None;
    for iter in 1..=max_iters {
        let (next, pi) = optimal_bellman_apply(mdp, uset, reg, mode, &v)?;
        let res = sup_norm_diff(&next, &v);
        residuals.push(res);
        v = next;
        policy = Some(pi);
        if res <= tol {
            return Ok(FixedPointResult {
                values: v,
                policy,
                iterations: iter,
                residuals,
                converged: true,
            });
        }
    }
    Ok(FixedPointResult {
        values: v,
        policy,
        iterations: max_iters,
        residuals,
        converged: false,
    })
}

/// Exact evaluation of a fixed policy by iterating its operator from `V = 0`.
pub fn policy_evaluate_exact(
    mdp: &TabularMdp,
    uset: &UncertaintySet,
    policy: &TabularPolicy,
    reg: &RegularizationSpec,
    mode: RobustnessMode,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPointResult> {
    if !(tol > 0.0) {
        return Err(CoreError::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let mut v = Array1::zeros(mdp.n_states);
    let mut residuals = Vec::new();
    for iter in 1..=max_iters {
        let next = bellman_apply(mdp, uset, policy, reg, mode, &v)?;
        let res = sup_norm_diff(&next, &v);
        residuals.push(res);
        v = next;
        if res <= tol {
            return Ok(FixedPointResult {
                values: v,
                policy: None,
                iterations: iter,
                residuals,
                converged: true,
            });
        }
    }
    Ok(FixedPointResult {
        values: v,
        policy: None,
        iterations: max_iters,
        residuals,
        converged: false,
    })
}

/// Suboptimality guarantee for the greedy policy after `n` sweeps of value
/// iteration against approximate backups:
///
/// `2*gamma*eps/(1-gamma)^2 + 2*gamma^(n+1)/(1-gamma) * init_gap`
///
/// where `eps` bounds the per-sweep backup error and `init_gap` is
/// `||V* - V_0||` in the sup norm. Exact backups (`eps = 0`) leave only the
/// geometric term.
pub fn vi_error_bound(eps: f64, gamma: f64, n: u32, init_gap: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CoreError::Domain(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if !eps.is_finite() || eps < 0.0 || !init_gap.is_finite() || init_gap < 0.0 {
        return Err(CoreError::Domain(
            "eps and init_gap must be finite and non-negative".into(),
        ));
    }
    let one_minus = 1.0 - gamma;
    Ok(2.0 * gamma * eps / (one_minus * one_minus)
        + 2.0 * gamma.powi(n as i32 + 1) / one_minus * init_gap)
}
