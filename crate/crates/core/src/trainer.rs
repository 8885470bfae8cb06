//! The acting/evaluation loop shared by the MPO and SVG trainers.
//!
//! Experience always comes from a single acting environment; robustness
//! enters only through the TD-target fan-out over the uncertainty-set
//! models. Algorithms plug in as [`Improver`]s that rewrite the policy once
//! per round. Every random draw comes from a named stream of the run seed,
//! so a (config, seed) pair fixes the entire metrics stream bit for bit.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{DynamicsModel, EnvModel, EnvSet, DEFAULT_EPISODE_STEPS};
use crate::error::{CoreError, Result};
use crate::nn::{Adam, GaussianPolicy, MlpNet};
use crate::policy_eval::{critic_update, CriticPair, ReplayBuffer, Transition};
use crate::rng::{stream_rng, Stream};
use crate::spec::RobustnessSpec;

/// Schedule knobs common to both trainers. The round cadence and update
/// counts are desk-scale defaults; at this scale one improvement round per
/// 50 environment steps with 15 critic updates keeps a full training run in
/// the minutes range without starving the critic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainLoopConfig {
    pub episode_steps: usize,
    pub steps_per_round: usize,
    pub critic_updates_per_round: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub replay_capacity: usize,
    pub target_update_period: usize,
    pub discount: f64,
    pub critic_lr: f64,
    /// Next-action draws averaged per TD target; 1 matches the
    /// single-sample form, more reduce target variance.
    pub next_action_samples: usize,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        TrainLoopConfig {
            episode_steps: DEFAULT_EPISODE_STEPS,
            steps_per_round: 50,
            critic_updates_per_round: 15,
            batch_size: 256,
            warmup_steps: 1000,
            replay_capacity: crate::policy_eval::DEFAULT_REPLAY_CAPACITY,
            target_update_period: 200,
            discount: 0.99,
            critic_lr: 3e-4,
            next_action_samples: 1,
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episode_steps == 0
            || self.steps_per_round == 0
            || self.batch_size == 0
            || self.replay_capacity == 0
            || self.target_update_period == 0
            || self.next_action_samples == 0
        {
            return Err(CoreError::Config("loop sizes must be positive".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(CoreError::Config(format!(
                "discount must lie in (0, 1), got {}",
                self.discount
            )));
        }
        if !(self.critic_lr > 0.0) {
            return Err(CoreError::Config("critic_lr must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log. `wall_ms` is measured wall time and is the
/// only column outside the determinism guarantee.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub nominal_return: f64,
    pub critic_loss: f64,
    pub eta: f64,
    pub kl_mu: f64,
    pub kl_sigma: f64,
    pub wall_ms: f64,
    /// Training-set index the episode acted in; not part of the CSV schema.
    pub acting_env: usize,
}

/// Diagnostics an improvement round reports into the metrics stream.
#[derive(Debug, Clone, Copy)]
pub struct ImproveDiag {
    pub eta: f64,
    pub kl_mu: f64,
    pub kl_sigma: f64,
}

/// One policy-improvement round. The critic is frozen during the round; the
/// trainer snapshots the pre-update policy as the next reference.
pub trait Improver {
    fn improve(
        &mut self,
        replay: &ReplayBuffer,
        critic: &MlpNet,
        policy: &mut GaussianPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<ImproveDiag>;
}

/// Which environment collects experience: the nominal member (robust
/// training) or a fresh uniform draw from the training set per episode
/// (domain randomization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActingScheme {
    #[default]
    Nominal,
    UniformTraining,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub policy: GaussianPolicy,
    pub pi_ref: GaussianPolicy,
    pub critic: CriticPair,
    pub metrics: Vec<MetricsRow>,
    /// Populated when the run stopped early on a numeric or physics
    /// failure; metrics and networks hold the state at the abort point.
    pub aborted: Option<String>,
}

fn sample_action(g: &crate::nn::DiagGaussian, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..g.dim())
        .map(|i| {
            let z: f64 = StandardNormal.sample(rng);
            g.mean[i] + g.std[i] * z
        })
        .collect()
}

fn abortable(e: &CoreError) -> bool {
    matches!(e, CoreError::Numeric(_) | CoreError::Physics(_) | CoreError::Data(_))
}

/// Runs the full acting/evaluation/improvement loop against the given
/// uncertainty-set models (physical or learned).
#[allow(clippy::too_many_arguments)]
pub fn run_training_with_models(
    env_set: &EnvSet,
    models: &mut [Box<dyn DynamicsModel>],
    spec: &RobustnessSpec,
    cfg: &TrainLoopConfig,
    episodes: usize,
    policy: GaussianPolicy,
    critic_net: MlpNet,
    improver: &mut dyn Improver,
    acting: ActingScheme,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if spec.weights.len() != models.len() {
        return Err(CoreError::Shape(format!(
            "{} weights for {} uncertainty-set models",
            spec.weights.len(),
            models.len()
        )));
    }

    let action_dim = policy.action_dim;
    let mut policy = policy;
    let mut pi_ref = policy.clone();
    let mut critic = CriticPair::new(critic_net, cfg.target_update_period)?;
    let mut critic_opt = Adam::new(cfg.critic_lr, critic.online.params.len());
    let mut replay = ReplayBuffer::new(cfg.replay_capacity)?;

    let mut acting_rng = stream_rng(seed, Stream::Acting);
    let mut minibatch_rng = stream_rng(seed, Stream::Minibatch);
    let mut noise_rng = stream_rng(seed, Stream::TargetNoise);
    let mut improve_rng = stream_rng(seed, Stream::ImprovementSampling);
    let mut dr_rng = stream_rng(seed, Stream::DomainRandomization);

    // Acting environments are private clones so TD fan-out never perturbs
    // the collection trajectory.
    let mut acting_envs: Vec<EnvModel> = env_set.training_set.clone();
    let nominal_index = env_set.nominal_index;

    let mut metrics = Vec::with_capacity(episodes);
    let mut last_diag = ImproveDiag { eta: f64::NAN, kl_mu: f64::NAN, kl_sigma: f64::NAN };
    let mut global_step = 0usize;

    for episode in 0..episodes {
        let t_start = std::time::Instant::now();
        let env_index = match acting {
            ActingScheme::Nominal => nominal_index,
            ActingScheme::UniformTraining => {
                use rand::Rng;
                dr_rng.random_range(0..acting_envs.len())
            }
        };
        let env = &mut acting_envs[env_index];
        env.reset();

        let mut episode_return = 0.0;
        let mut losses = Vec::new();
        let mut abort: Option<String> = None;

        'steps: for _ in 0..cfg.episode_steps {
            let state = env.get_state();
            let obs = env.observe();
            let dist = policy.dist_single(&obs)?;
            let action = sample_action(&dist, &mut acting_rng);
            let (next_state, reward) = match env.step(&action) {
                Ok(x) => x,
                Err(e) if abortable(&e) => {
                    abort = Some(format!("acting step failed: {e}"));
                    break 'steps;
                }
                Err(e) => return Err(e),
            };
            episode_return += reward;
            replay.push(Transition {
                obs,
                action,
                reward,
                obs_next: crate::envs::observation(&next_state),
                env_state: state,
            });
            global_step += 1;

            if replay.len() >= cfg.warmup_steps && global_step % cfg.steps_per_round == 0 {
                for _ in 0..cfg.critic_updates_per_round {
                    let batch = replay.sample(&mut minibatch_rng, cfg.batch_size)?;
                    let noise: Vec<Array2<f64>> = (0..cfg.next_action_samples)
                        .map(|_| {
                            Array2::from_shape_fn((batch.len(), action_dim), |_| {
                                StandardNormal.sample(&mut noise_rng)
                            })
                        })
                        .collect();
                    match critic_update(
                        &batch,
                        &mut critic,
                        models,
                        spec,
                        &policy,
                        &pi_ref,
                        cfg.discount,
                        &noise,
                        &mut critic_opt,
                    ) {
                        Ok(loss) => losses.push(loss),
                        Err(e) if abortable(&e) => {
                            abort = Some(format!("critic update failed: {e}"));
                            break 'steps;
                        }
                        Err(e) => return Err(e),
                    }
                }
                let prev = policy.clone();
                match improver.improve(&replay, &critic.online, &mut policy, &mut improve_rng) {
                    Ok(diag) => last_diag = diag,
                    Err(e) if abortable(&e) => {
                        abort = Some(format!("improvement failed: {e}"));
                        break 'steps;
                    }
                    Err(e) => return Err(e),
                }
                pi_ref = prev;
            }
        }

        let critic_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        metrics.push(MetricsRow {
            episode,
            nominal_return: episode_return,
            critic_loss,
            eta: last_diag.eta,
            kl_mu: last_diag.kl_mu,
            kl_sigma: last_diag.kl_sigma,
            wall_ms: t_start.elapsed().as_secs_f64() * 1e3,
            acting_env: env_index,
        });
        if let Some(msg) = abort {
            return Ok(TrainOutput { policy, pi_ref, critic, metrics, aborted: Some(msg) });
        }
    }

    Ok(TrainOutput { policy, pi_ref, critic, metrics, aborted: None })
}

/// As [`run_training_with_models`] with the uncertainty set taken from the
/// environment set's training members.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    env_set: &EnvSet,
    spec: &RobustnessSpec,
    cfg: &TrainLoopConfig,
    episodes: usize,
    policy: GaussianPolicy,
    critic_net: MlpNet,
    improver: &mut dyn Improver,
    acting: ActingScheme,
    seed: u64,
) -> Result<TrainOutput> {
    let mut models: Vec<Box<dyn DynamicsModel>> = env_set
        .training_set
        .iter()
        .map(|m| Box::new(m.clone()) as Box<dyn DynamicsModel>)
        .collect();
    run_training_with_models(
        env_set,
        &mut models,
        spec,
        cfg,
        episodes,
        policy,
        critic_net,
        improver,
        acting,
        seed,
    )
}
