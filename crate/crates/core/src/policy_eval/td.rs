use ndarray::{concatenate, Array1, Array2, Axis};

use crate::envs::{observation, DynamicsModel};
use crate::error::{CoreError, Result};
use crate::nn::{batch_kl, GaussianPolicy, MlpNet};
use crate::spec::{RobustnessMode, RobustnessSpec};

use super::replay::Transition;

/// Targets for the transitions that survived the model fan-out. `kept` maps
/// positions in `targets` back into the input batch; transitions dropped
/// because some model diverged are only counted.
#[derive(Debug, Clone)]
pub struct TdBatch {
    pub targets: Vec<f64>,
    pub kept: Vec<usize>,
    pub skipped: usize,
}

fn stack_obs_action(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[obs.view(), actions.view()]).expect("row counts match")
}

/// Critic input convention shared by training and evaluation: observation
/// columns first, action columns after.
pub fn critic_input(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    stack_obs_action(obs, actions)
}

/// Per-model continuation candidates for one batch.
///
/// Every model re-steps the stored raw state under the stored action; next
/// actions come from `pi_k` at that model's own next state, but use the
/// shared noise rows per transition, so differences between candidates
/// reflect the models and not the sampling. With several noise draws the
/// critic value is averaged over them; the KL penalty depends only on the
/// next state and enters once.
fn model_candidates(
    batch: &[&Transition],
    model: &mut dyn DynamicsModel,
    target_critic: &MlpNet,
    pi_k: &GaussianPolicy,
    pi_ref: &GaussianPolicy,
    tau: f64,
    noise: &[Array2<f64>],
    ok: &mut [bool],
) -> Result<Array1<f64>> {
    let n = batch.len();
    let obs_dim = batch[0].obs.len();
    let mut next_obs = Array2::zeros((n, obs_dim));
    for (t, tr) in batch.iter().enumerate() {
        if !ok[t] {
            continue;
        }
        model.set_state(tr.env_state)?;
        match model.step(&tr.action) {
            Ok((state, _)) => {
                let row = observation(&state);
                for (c, v) in row.iter().enumerate() {
                    next_obs[[t, c]] = *v;
                }
            }
            Err(CoreError::Physics(_)) | Err(CoreError::Numeric(_)) => ok[t] = false,
            Err(e) => return Err(e),
        }
    }

    let (mean_k, std_k) = pi_k.dist(&next_obs)?;
    let mut q_acc = Array1::zeros(n);
    for draw in noise {
        let next_actions = &mean_k + &(&std_k * draw);
        let q = target_critic.forward(&stack_obs_action(&next_obs, &next_actions))?;
        q_acc = q_acc + &q.index_axis(Axis(1), 0);
    }
    let mut cand = q_acc / noise.len() as f64;
    if tau > 0.0 {
        let (mean_ref, std_ref) = pi_ref.dist(&next_obs)?;
        let kl = batch_kl(&mean_k, &std_k, &mean_ref, &std_ref);
        cand = cand - tau * &kl;
    }
    Ok(cand)
}

/// TD targets under the configured robustness mode.
///
/// The reward term is always the stored nominal reward; the aggregation
/// (worst case, weighted average, or nominal member) covers only the
/// continuation value. With the entropy-regularized objective each
/// candidate carries its own `-tau * KL(pi_k || pi_ref)` penalty at the
/// model's next state. `noise` holds one or more standard-normal draws of
/// shape `batch x action_dim`; several draws average the continuation
/// critic value per model.
#[allow(clippy::too_many_arguments)]
pub fn td_targets(
    batch: &[&Transition],
    models: &mut [Box<dyn DynamicsModel>],
    spec: &RobustnessSpec,
    target_critic: &MlpNet,
    pi_k: &GaussianPolicy,
    pi_ref: &GaussianPolicy,
    gamma: f64,
    noise: &[Array2<f64>],
) -> Result<TdBatch> {
    if batch.is_empty() {
        return Ok(TdBatch { targets: Vec::new(), kept: Vec::new(), skipped: 0 });
    }
    if models.is_empty() {
        return Err(CoreError::Config("uncertainty set has no models".into()));
    }
    if spec.weights.len() != models.len() {
        return Err(CoreError::Shape(format!(
            "{} weights for {} models",
            spec.weights.len(),
            models.len()
        )));
    }
    if spec.nominal_index >= models.len() {
        return Err(CoreError::Shape(format!(
            "nominal index {} out of range for {} models",
            spec.nominal_index,
            models.len()
        )));
    }
    if noise.is_empty() {
        return Err(CoreError::Shape("at least one noise draw is required".into()));
    }
    for draw in noise {
        if draw.dim() != (batch.len(), pi_k.action_dim) {
            return Err(CoreError::Shape(format!(
                "noise shape {:?} does not match batch {} x action_dim {}",
                draw.dim(),
                batch.len(),
                pi_k.action_dim
            )));
        }
    }

    let tau = spec.effective_tau();
    let eval_indices: Vec<usize> = match spec.mode {
        RobustnessMode::NonRobust => vec![spec.nominal_index],
        _ => (0..models.len()).collect(),
    };

    let mut ok = vec![true; batch.len()];
    let mut candidates: Vec<Array1<f64>> = Vec::with_capacity(eval_indices.len());
    for &m in &eval_indices {
        candidates.push(model_candidates(
            batch,
            models[m].as_mut(),
            target_critic,
            pi_k,
            pi_ref,
            tau,
            noise,
            &mut ok,
        )?);
    }

    let mut targets = Vec::new();
    let mut kept = Vec::new();
    for (t, tr) in batch.iter().enumerate() {
        if !ok[t] {
            continue;
        }
        let agg = match spec.mode {
            RobustnessMode::NonRobust => candidates[0][t],
            RobustnessMode::Robust => candidates
                .iter()
                .map(|c| c[t])
                .fold(f64::INFINITY, f64::min),
            RobustnessMode::SoftRobust => eval_indices
                .iter()
                .zip(&candidates)
                .map(|(&m, c)| spec.weights[m] * c[t])
                .sum(),
        };
        targets.push(tr.reward + gamma * agg);
        kept.push(t);
    }
    let skipped = batch.len() - kept.len();
    Ok(TdBatch { targets, kept, skipped })
}

/// The critic stores the shifted value; the unshifted action value
/// subtracts the KL penalty at the queried state. This is the single
/// reporting point where the full Q is reconstructed.
pub fn full_q_value(
    critic: &MlpNet,
    pi_k: &GaussianPolicy,
    pi_ref: &GaussianPolicy,
    obs: &Array2<f64>,
    actions: &Array2<f64>,
    tau: f64,
) -> Result<Array1<f64>> {
    let q = critic.forward(&stack_obs_action(obs, actions))?;
    let q = q.index_axis(Axis(1), 0).to_owned();
    if tau == 0.0 {
        return Ok(q);
    }
    let (mean_k, std_k) = pi_k.dist(obs)?;
    let (mean_ref, std_ref) = pi_ref.dist(obs)?;
    Ok(q - tau * &batch_kl(&mean_k, &std_k, &mean_ref, &std_ref))
}
