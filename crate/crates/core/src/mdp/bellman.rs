use ndarray::{s, Array1, Array2};

use crate::error::{CoreError, Result};
use crate::spec::RobustnessMode;

use super::types::{RegularizationSpec, TabularMdp, TabularPolicy, UncertaintySet, ValueFunction};

/// Aggregated continuation value `agg_p E_{s'~p}[V]` for one state-action
/// pair. Worst case minimizes per pair, which is what makes the robust
/// operator rectangular: the adversary picks a kernel for every pair
/// independently.
fn continuation(
    uset: &UncertaintySet,
    mode: RobustnessMode,
    s: usize,
    a: usize,
    v: &ValueFunction,
) -> f64 {
    match mode {
        RobustnessMode::NonRobust => uset.kernels[0].slice(s![s, a, ..]).dot(v),
        RobustnessMode::Robust => uset
            .kernels
            .iter()
            .map(|k| k.slice(s![s, a, ..]).dot(v))
            .fold(f64::INFINITY, f64::min),
        RobustnessMode::SoftRobust => uset
            .kernels
            .iter()
            .zip(&uset.weights)
            .map(|(k, w)| w * k.slice(s![s, a, ..]).dot(v))
            .sum(),
    }
}

fn check_inputs(
    mdp: &TabularMdp,
    uset: &UncertaintySet,
    reg: &RegularizationSpec,
    v: &ValueFunction,
) -> Result<()> {
    uset.check_compatible(mdp)?;
    if v.len() != mdp.n_states {
        return Err(CoreError::Shape(format!(
            "value function has {} entries for {} states",
            v.len(),
            mdp.n_states
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::Domain("value function has non-finite entries".into()));
    }
    if reg.reference.probs.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(CoreError::Shape("reference policy shape mismatch".into()));
    }
    Ok(())
}

/// One application of the fixed-policy operator:
///
/// `(T V)(s) = E_{a~pi}[ r(s,a) - tau*log(pi(a|s)/ref(a|s)) + gamma*agg(s,a) ]`
///
/// With `tau = 0` the KL term is skipped entirely, so the unregularized
/// operator is recovered exactly and the reference policy is not consulted.
pub fn bellman_apply(
    mdp: &TabularMdp,
    uset: &UncertaintySet,
    policy: &TabularPolicy,
    reg: &RegularizationSpec,
    mode: RobustnessMode,
    v: &ValueFunction,
) -> Result<ValueFunction> {
    check_inputs(mdp, uset, reg, v)?;
    if policy.probs.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(CoreError::Shape("policy shape mismatch".into()));
    }
    let mut out = Array1::zeros(mdp.n_states);
    for s_idx in 0..mdp.n_states {
        let mut acc = 0.0;
        for a in 0..mdp.n_actions {
            let p = policy.probs[[s_idx, a]];
            if p == 0.0 {
                continue;
            }
            let mut term = mdp.reward[[s_idx, a]]
                + mdp.discount * continuation(uset, mode, s_idx, a, v);
            if reg.tau > 0.0 {
                let p_ref = reg.reference.probs[[s_idx, a]];
                if p_ref <= 0.0 {
                    return Err(CoreError::Divergence(format!(
                        "policy puts mass {p} on action {a} in state {s_idx} \
                         where the reference has none"
                    )));
                }
                term -= reg.tau * (p.ln() - p_ref.ln());
            }
            acc += p * term;
        }
        out[s_idx] = acc;
    }
    Ok(out)
}

/// One application of the optimal operator, together with the maximizing
/// policy.
///
/// With `tau = 0` this is a plain max over actions; ties break toward the
/// lowest action index. With `tau > 0` the maximizer over the simplex has
/// the closed form `pi*(a|s) ~ ref(a|s) * exp(adv(s,a)/tau)` and the value
/// is `tau * log sum_a ref(a|s) * exp(adv(s,a)/tau)`, evaluated with a
/// max-shifted log-sum-exp. Actions outside the reference support get zero
/// probability and do not enter the value.
pub fn optimal_bellman_apply(
    mdp: &TabularMdp,
    uset: &UncertaintySet,
    reg: &RegularizationSpec,
    mode: RobustnessMode,
    v: &ValueFunction,
) -> Result<(ValueFunction, TabularPolicy)> {
    check_inputs(mdp, uset, reg, v)?;
    let mut out = Array1::zeros(mdp.n_states);
    let mut probs = Array2::zeros((mdp.n_states, mdp.n_actions));
    let mut adv = vec![0.0; mdp.n_actions];
    for s_idx in 0..mdp.n_states {
        for (a, slot) in adv.iter_mut().enumerate() {
            *slot = mdp.reward[[s_idx, a]] + mdp.discount * continuation(uset, mode, s_idx, a, v);
        }
        if reg.tau == 0.0 {
            let mut best = 0;
            for a in 1..mdp.n_actions {
                if adv[a] > adv[best] {
                    best = a;
                }
            }
            out[s_idx] = adv[best];
            probs[[s_idx, best]] = 1.0;
        } else {
            // z_a = log ref(a) + adv(a)/tau over the reference support.
            let mut z = vec![f64::NEG_INFINITY; mdp.n_actions];
            let mut z_max = f64::NEG_INFINITY;
            for a in 0..mdp.n_actions {
                let p_ref = reg.reference.probs[[s_idx, a]];
                if p_ref > 0.0 {
                    z[a] = p_ref.ln() + adv[a] / reg.tau;
                    z_max = z_max.max(z[a]);
                }
            }
            let sum_exp: f64 =
                z.iter().filter(|x| x.is_finite()).map(|x| (x - z_max).exp()).sum();
            let lse = z_max + sum_exp.ln();
            out[s_idx] = reg.tau * lse;
            let mut row_sum = 0.0;
            for a in 0..mdp.n_actions {
                if z[a].is_finite() {
                    probs[[s_idx, a]] = (z[a] - lse).exp();
                    row_sum += probs[[s_idx, a]];
                }
            }
            for a in 0..mdp.n_actions {
                probs[[s_idx, a]] /= row_sum;
            }
        }
    }
    Ok((out, TabularPolicy { probs }))
}
