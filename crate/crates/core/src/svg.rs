//! Entropy-regularized SVG(0): reparameterized policy gradients through the
//! same robust/soft-robust critic the MPO trainers use.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::EnvSet;
use crate::error::{CoreError, Result};
use crate::nn::{
    batch_kl_cov, batch_kl_mean, entropy_on, Adam, GaussianPolicy, MlpNet, MlpSpec,
    PolicyHeadConfig, Tape,
};
use crate::policy_eval::ReplayBuffer;
use crate::rng::{stream_rng, Stream};
use crate::spec::RobustnessSpec;
use crate::trainer::{
    run_training, ActingScheme, ImproveDiag, Improver, TrainLoopConfig, TrainOutput,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvgConfig {
    /// Entropy bonus coefficient.
    pub alpha: f64,
    pub lr: f64,
    pub policy_widths: Vec<usize>,
    pub critic_widths: Vec<usize>,
    /// Variance floor; the head squashes means through tanh scaled to the
    /// actuation limit.
    pub min_variance: f64,
    pub tanh_on_mean: bool,
    pub init_std: f64,
    /// Policy gradient steps per improvement round.
    pub updates_per_round: usize,
    pub schedule: TrainLoopConfig,
}

impl Default for SvgConfig {
    fn default() -> Self {
        SvgConfig {
            alpha: 1e-3,
            lr: 3e-4,
            policy_widths: vec![64, 64],
            critic_widths: vec![64, 64],
            min_variance: 0.1,
            tanh_on_mean: true,
            init_std: 0.3,
            updates_per_round: 10,
            schedule: TrainLoopConfig::default(),
        }
    }
}

impl SvgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(CoreError::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) || self.updates_per_round == 0 {
            return Err(CoreError::Config("lr and updates_per_round must be positive".into()));
        }
        if self.policy_widths.is_empty() || self.critic_widths.is_empty() {
            return Err(CoreError::Config("network widths must be non-empty".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SvgGradientDiag {
    pub mean_q: f64,
    pub mean_entropy: f64,
}

/// Ascent gradient of `E[Q(s, a(zeta))] + alpha * H(pi(.|s))` with one
/// reparameterized action per state. The critic participates in the tape
/// only to route gradients into the action; its own parameters are left
/// untouched.
pub fn svg_policy_gradient(
    states: &Array2<f64>,
    policy: &GaussianPolicy,
    critic: &MlpNet,
    alpha: f64,
    noise: &Array2<f64>,
) -> Result<(Vec<f64>, SvgGradientDiag)> {
    if noise.dim() != (states.nrows(), policy.action_dim) {
        return Err(CoreError::Shape(format!(
            "noise shape {:?} does not match {} states x action_dim {}",
            noise.dim(),
            states.nrows(),
            policy.action_dim
        )));
    }
    let tape = Tape::new();
    let (mean, std, leaves) = policy.dist_on(&tape, states)?;
    let action = mean.add(std.mul(tape.leaf(noise.clone())));
    let s_leaf = tape.leaf(states.clone());
    let critic_leaves = critic.param_leaves(&tape);
    let q = critic.forward_from(s_leaf.concat_cols(action), &critic_leaves.vars);
    let mean_q = q.mean_all();
    let mean_entropy = entropy_on(std).mean_all();
    let objective = mean_q.add(mean_entropy.scale(alpha));
    let diag = SvgGradientDiag {
        mean_q: mean_q.value()[[0, 0]],
        mean_entropy: mean_entropy.value()[[0, 0]],
    };
    if !diag.mean_q.is_finite() {
        return Err(CoreError::Numeric(format!("SVG objective is not finite: {}", diag.mean_q)));
    }
    let grads = objective.backward()?;
    Ok((policy.net.flat_grad(&grads, &leaves), diag))
}

pub struct SvgImprover {
    pub cfg: SvgConfig,
    opt: Adam,
}

impl SvgImprover {
    pub fn new(cfg: SvgConfig, policy_param_count: usize) -> Self {
        let opt = Adam::new(cfg.lr, policy_param_count);
        SvgImprover { cfg, opt }
    }

    /// One ascent step on a given state batch; exposed for fixed-critic
    /// studies.
    pub fn ascend(
        &mut self,
        states: &Array2<f64>,
        policy: &mut GaussianPolicy,
        critic: &MlpNet,
        noise: &Array2<f64>,
    ) -> Result<SvgGradientDiag> {
        let (grad, diag) = svg_policy_gradient(states, policy, critic, self.cfg.alpha, noise)?;
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.opt.step(&mut policy.net.params.data, &descent)?;
        Ok(diag)
    }
}

impl Improver for SvgImprover {
    fn improve(
        &mut self,
        replay: &ReplayBuffer,
        critic: &MlpNet,
        policy: &mut GaussianPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<ImproveDiag> {
        let n = self.cfg.schedule.batch_size;
        let act_dim = policy.action_dim;
        let mut last_states: Option<Array2<f64>> = None;
        let pre_round = policy.clone();
        for _ in 0..self.cfg.updates_per_round {
            let batch = replay.sample(rng, n)?;
            let obs_dim = batch[0].obs.len();
            let mut states = Array2::zeros((n, obs_dim));
            for (r, tr) in batch.iter().enumerate() {
                for (c, v) in tr.obs.iter().enumerate() {
                    states[[r, c]] = *v;
                }
            }
            let noise =
                Array2::from_shape_fn((n, act_dim), |_| StandardNormal.sample(rng));
            self.ascend(&states, policy, critic, &noise)?;
            last_states = Some(states);
        }
        // Per-round KL diagnostics against the pre-round policy.
        let states = last_states.expect("at least one update per round");
        let (new_mean, new_std) = policy.dist(&states)?;
        let (old_mean, old_std) = pre_round.dist(&states)?;
        Ok(ImproveDiag {
            eta: f64::NAN,
            kl_mu: batch_kl_mean(&new_mean, &old_mean, &old_std).mean().unwrap(),
            kl_sigma: batch_kl_cov(&new_std, &old_std).mean().unwrap(),
        })
    }
}

/// SVG training with the critic's robustness controlled by `spec`, acting
/// in the nominal environment.
pub fn train_svg(
    env_set: &EnvSet,
    spec: &RobustnessSpec,
    cfg: &SvgConfig,
    episodes: usize,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let obs_dim = env_set.domain().observation_dim();
    let act_dim = env_set.domain().action_dim();
    let head = PolicyHeadConfig {
        tanh_on_mean: cfg.tanh_on_mean,
        min_variance: cfg.min_variance,
        action_scale: env_set.nominal.params.actuation_limit,
        init_std: cfg.init_std,
    };
    let mut prng = stream_rng(seed, Stream::PolicyInit);
    let policy = GaussianPolicy::new(
        obs_dim,
        act_dim,
        MlpSpec::standard(cfg.policy_widths.clone()),
        head,
        &mut prng,
    )?;
    let mut crng = stream_rng(seed, Stream::CriticInit);
    let critic = MlpNet::new(
        obs_dim + act_dim,
        1,
        MlpSpec::standard(cfg.critic_widths.clone()),
        &mut crng,
    )?;
    let mut improver = SvgImprover::new(cfg.clone(), policy.net.params.len());
    run_training(
        env_set,
        spec,
        &cfg.schedule,
        episodes,
        policy,
        critic,
        &mut improver,
        ActingScheme::Nominal,
        seed,
    )
}
