use ndarray::Array2;

use crate::envs::DynamicsModel;
use crate::error::{CoreError, Result};
use crate::nn::{Adam, GaussianPolicy, MlpNet, Tape};
use crate::spec::RobustnessSpec;

use super::replay::Transition;
use super::td::{critic_input, td_targets};

/// Online critic plus its periodically copied target. The copy is a full
/// parameter snapshot and only ever happens between updates, so all targets
/// within one period see one frozen set of target weights.
#[derive(Debug, Clone)]
pub struct CriticPair {
    pub online: MlpNet,
    pub target: MlpNet,
    pub update_period: usize,
    updates: usize,
}

impl CriticPair {
    pub fn new(net: MlpNet, update_period: usize) -> Result<Self> {
        if update_period == 0 {
            return Err(CoreError::Config("target update period must be positive".into()));
        }
        let target = net.clone();
        Ok(CriticPair { online: net, target, update_period, updates: 0 })
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn sync_target(&mut self) {
        self.target.params.data.copy_from_slice(&self.online.params.data);
    }
}

/// One TD regression step: compute targets with the frozen target net, take
/// one optimizer step on the squared error of the online net, and refresh
/// the target on period boundaries. Returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn critic_update(
    batch: &[&Transition],
    critic: &mut CriticPair,
    models: &mut [Box<dyn DynamicsModel>],
    spec: &RobustnessSpec,
    pi_k: &GaussianPolicy,
    pi_ref: &GaussianPolicy,
    gamma: f64,
    noise: &[Array2<f64>],
    opt: &mut Adam,
) -> Result<f64> {
    let td = td_targets(batch, models, spec, &critic.target, pi_k, pi_ref, gamma, noise)?;
    if td.kept.is_empty() {
        return Err(CoreError::Data("every transition in the batch was skipped".into()));
    }

    let obs_dim = batch[0].obs.len();
    let act_dim = batch[0].action.len();
    let n = td.kept.len();
    let mut obs = Array2::zeros((n, obs_dim));
    let mut actions = Array2::zeros((n, act_dim));
    let mut targets = Array2::zeros((n, 1));
    for (row, (&t, y)) in td.kept.iter().zip(&td.targets).enumerate() {
        for (c, v) in batch[t].obs.iter().enumerate() {
            obs[[row, c]] = *v;
        }
        for (c, v) in batch[t].action.iter().enumerate() {
            actions[[row, c]] = *v;
        }
        targets[[row, 0]] = *y;
    }

    let x = critic_input(&obs, &actions);
    let tape = Tape::new();
    let (q, leaves) = critic.online.forward_on(&tape, &x)?;
    let y = tape.leaf(targets);
    let loss = q.sub(y).square().mean_all();
    let loss_value = loss.value()[[0, 0]];
    if !loss_value.is_finite() {
        return Err(CoreError::Numeric(format!("critic loss is not finite: {loss_value}")));
    }
    let grads = loss.backward()?;
    let flat = critic.online.flat_grad(&grads, &leaves);
    opt.step(&mut critic.online.params.data, &flat)?;
    if !critic.online.params.all_finite() {
        return Err(CoreError::Numeric("critic parameters left the finite range".into()));
    }

    critic.updates += 1;
    if critic.updates % critic.update_period == 0 {
        critic.sync_target();
    }
    Ok(loss_value)
}
