//! MPO policy improvement: E-step sample weighting through the temperature
//! dual, M-step trust-region fitting, and the full training entry points.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{DynamicsModel, EnvSet};
use crate::error::{CoreError, Result};
use crate::nn::{
    batch_kl_cov, batch_kl_mean, kl_cov_on, kl_mean_on, log_prob_on, Adam, GaussianPolicy,
    MlpNet, MlpSpec, PolicyHeadConfig, Tape,
};
use crate::policy_eval::{critic_input, ReplayBuffer};
use crate::rng::{stream_rng, Stream};
use crate::spec::{Objective, RobustnessMode, RobustnessSpec};
use crate::trainer::{
    run_training, run_training_with_models, ActingScheme, ImproveDiag, Improver,
    TrainLoopConfig, TrainOutput,
};

/// Dual search bracket and tolerance for the temperature.
const ETA_MIN: f64 = 1e-6;
const ETA_MAX: f64 = 1e3;
const ETA_TOL: f64 = 1e-5;
const LAMBDA_MAX: f64 = 1e8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpoConfig {
    /// E-step KL budget relative to the sample distribution.
    pub epsilon: f64,
    /// M-step mean trust region.
    pub epsilon_mu: f64,
    /// M-step covariance trust region.
    pub epsilon_sigma: f64,
    /// Actions sampled per state for the E-step.
    pub n_action_samples: usize,
    /// States per improvement round.
    pub estep_states: usize,
    /// Gradient steps per M-step.
    pub mstep_iters: usize,
    /// Dual ascent rate for the M-step multipliers.
    pub dual_lr: f64,
    /// Policy learning rate.
    pub lr: f64,
    pub policy_widths: Vec<usize>,
    pub critic_widths: Vec<usize>,
    /// Variance floor of the policy head; keeps log densities bounded.
    pub min_variance: f64,
    pub init_std: f64,
    /// Acting/evaluation cadence shared with the SVG trainer. Holds the
    /// discount and batch size.
    pub schedule: TrainLoopConfig,
}

impl Default for MpoConfig {
    fn default() -> Self {
        MpoConfig {
            epsilon: 0.1,
            epsilon_mu: 0.01,
            epsilon_sigma: 1e-5,
            n_action_samples: 15,
            estep_states: 128,
            mstep_iters: 10,
            dual_lr: 1.0,
            lr: 3e-4,
            policy_widths: vec![64, 64],
            critic_widths: vec![64, 64],
            min_variance: 1e-4,
            init_std: 0.3,
            schedule: TrainLoopConfig::default(),
        }
    }
}

impl MpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.epsilon_mu > 0.0) || !(self.epsilon_sigma > 0.0) {
            return Err(CoreError::Config("KL budgets must be positive".into()));
        }
        if self.n_action_samples < 2 || self.estep_states == 0 || self.mstep_iters == 0 {
            return Err(CoreError::Config(
                "need at least 2 action samples, 1 state, 1 M-step iteration".into(),
            ));
        }
        if !(self.dual_lr > 0.0) || !(self.lr > 0.0) {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        if self.policy_widths.is_empty() || self.critic_widths.is_empty() {
            return Err(CoreError::Config("network widths must be non-empty".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone)]
pub struct EStepResult {
    /// Per-state simplex over the sampled actions, `K x N`.
    pub weights: Array2<f64>,
    pub eta: f64,
    /// Average empirical KL of the weights to uniform-over-samples.
    pub kl_to_uniform: f64,
}

/// Temperature dual `g(eta) = eta*epsilon + eta * mean_j LSE_i(Q_ij/eta, 1/N)`
/// at a single temperature; convex in `eta`.
pub fn temperature_dual(q: &Array2<f64>, epsilon: f64, eta: f64) -> f64 {
    let row_max = q.map_axis(Axis(1), |r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    dual_value(q, &row_max, epsilon, eta)
}

/// As [`temperature_dual`] with the row maxima precomputed; the shift keeps
/// small temperatures from overflowing the exponentials.
fn dual_value(q: &Array2<f64>, row_max: &Array1<f64>, epsilon: f64, eta: f64) -> f64 {
    let k = q.nrows() as f64;
    let n = q.ncols() as f64;
    let mut acc = 0.0;
    for (row, &m) in q.outer_iter().zip(row_max.iter()) {
        let sum: f64 = row.iter().map(|v| ((v - m) / eta).exp()).sum();
        acc += m + eta * ((sum / n).ln());
    }
    eta * epsilon + acc / k
}

/// Golden-section minimum of a unimodal function on [lo, hi].
fn golden_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const INVPHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn softmax_rows(q: &Array2<f64>, eta: f64) -> Array2<f64> {
    let mut out = q.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| ((v - m) / eta).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn kl_to_uniform(weights: &Array2<f64>) -> f64 {
    let n = weights.ncols() as f64;
    let mut acc = 0.0;
    for row in weights.outer_iter() {
        for &w in row {
            if w > 0.0 {
                acc += w * (w * n).ln();
            }
        }
    }
    acc / weights.nrows() as f64
}

/// Solves the temperature dual and tilts the sample weights.
///
/// The dual is convex in the temperature, so a bounded scalar search in log
/// space finds the minimizer; a warm start narrows the bracket and falls
/// back to the full one whenever the narrowed minimum sits on its edge.
pub fn e_step_weights(
    q_values: &Array2<f64>,
    epsilon: f64,
    warm_start: Option<f64>,
) -> Result<EStepResult> {
    if q_values.is_empty() {
        return Err(CoreError::Shape("empty Q table".into()));
    }
    if q_values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("Q table has non-finite entries".into()));
    }
    if !(epsilon > 0.0) {
        return Err(CoreError::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let row_max =
        q_values.map_axis(Axis(1), |r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let g = |t: f64| dual_value(q_values, &row_max, epsilon, t.exp());

    let full = (ETA_MIN.ln(), ETA_MAX.ln());
    let bracket = match warm_start {
        Some(prev) if prev.is_finite() && prev > 0.0 => {
            ((prev / 50.0).max(ETA_MIN).ln(), (prev * 50.0).min(ETA_MAX).ln())
        }
        _ => full,
    };
    let mut t_star = golden_min(g, bracket.0, bracket.1, ETA_TOL);
    let edge = 3.0 * ETA_TOL;
    if bracket != full && ((t_star - bracket.0).abs() < edge || (t_star - bracket.1).abs() < edge)
    {
        t_star = golden_min(g, full.0, full.1, ETA_TOL);
    }
    let eta = t_star.exp();
    if !g(t_star).is_finite() {
        return Err(CoreError::Numeric("temperature dual evaluated non-finite".into()));
    }

    let weights = softmax_rows(q_values, eta);
    debug_assert!(weights.outer_iter().zip(q_values.outer_iter()).all(|(w, q)| {
        let tilted: f64 = w.iter().zip(q.iter()).map(|(w, q)| w * q).sum();
        tilted + 1e-9 >= q.mean().unwrap()
    }));
    Ok(EStepResult { kl_to_uniform: kl_to_uniform(&weights), weights, eta })
}

/// Lagrange multipliers of the decoupled M-step constraints; persistent
/// across rounds so the trust region stays calibrated.
#[derive(Debug, Clone, Copy)]
pub struct MStepDuals {
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
}

impl Default for MStepDuals {
    fn default() -> Self {
        MStepDuals { lambda_mu: 10.0, lambda_sigma: 10.0 }
    }
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub kl_mu: f64,
    pub kl_sigma: f64,
    /// Weighted log-likelihood at each inner iteration, pre-update.
    pub wll_trace: Vec<f64>,
    pub rejected: bool,
}

fn repeat_rows(x: &Array2<f64>, times: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    Array2::from_shape_fn((n * times, d), |(r, c)| x[[r / times, c]])
}

/// Fits the policy to the weighted action set under decoupled KL trust
/// regions, adapting the multipliers by dual ascent. A step that ends more
/// than 10x outside either budget is rolled back and its multiplier
/// boosted.
pub fn m_step(
    states: &Array2<f64>,
    actions: &Array2<f64>,
    weights: &Array2<f64>,
    policy: &mut GaussianPolicy,
    cfg: &MpoConfig,
    opt: &mut Adam,
    duals: &mut MStepDuals,
) -> Result<MStepOutcome> {
    let k = states.nrows();
    let n = cfg.n_action_samples;
    if weights.dim() != (k, n) || actions.nrows() != k * n {
        return Err(CoreError::Shape(format!(
            "inconsistent M-step shapes: {k} states, weights {:?}, {} actions",
            weights.dim(),
            actions.nrows()
        )));
    }

    let snapshot = policy.net.params.data.clone();
    let (old_mean, old_std) = policy.dist(states)?;
    let states_rep = repeat_rows(states, n);
    let weights_flat = Array2::from_shape_vec(
        (k * n, 1),
        weights.iter().cloned().collect(),
    )
    .expect("weights reshape");

    let mut wll_trace = Vec::with_capacity(cfg.mstep_iters);
    for _ in 0..cfg.mstep_iters {
        let tape = Tape::new();
        let (mean_rep, std_rep, leaves) = policy.dist_on(&tape, &states_rep)?;
        let logp = log_prob_on(tape.leaf(actions.clone()), mean_rep, std_rep);
        let wll = logp.mul(tape.leaf(weights_flat.clone())).sum_all().scale(1.0 / k as f64);

        let (mean_s, std_s) = policy.dist_from(&tape, states, &leaves);
        let old_mean_leaf = tape.leaf(old_mean.clone());
        let old_std_leaf = tape.leaf(old_std.clone());
        let kl_mu = kl_mean_on(mean_s, old_mean_leaf, old_std_leaf).mean_all();
        let kl_sigma = kl_cov_on(std_s, old_std_leaf).mean_all();

        let loss = wll
            .scale(-1.0)
            .add(kl_mu.scale(duals.lambda_mu))
            .add(kl_sigma.scale(duals.lambda_sigma));
        let grads = loss.backward()?;
        let flat = policy.net.flat_grad(&grads, &leaves);
        opt.step(&mut policy.net.params.data, &flat)?;

        wll_trace.push(wll.value()[[0, 0]]);
        let mu_val = kl_mu.value()[[0, 0]];
        let sig_val = kl_sigma.value()[[0, 0]];
        duals.lambda_mu = (duals.lambda_mu
            + cfg.dual_lr * ((mu_val - cfg.epsilon_mu) / cfg.epsilon_mu).clamp(-1e4, 1e4))
        .clamp(0.0, LAMBDA_MAX);
        duals.lambda_sigma = (duals.lambda_sigma
            + cfg.dual_lr * ((sig_val - cfg.epsilon_sigma) / cfg.epsilon_sigma).clamp(-1e4, 1e4))
        .clamp(0.0, LAMBDA_MAX);
    }

    let (new_mean, new_std) = policy.dist(states)?;
    let kl_mu = batch_kl_mean(&new_mean, &old_mean, &old_std).mean().unwrap();
    let kl_sigma = batch_kl_cov(&new_std, &old_std).mean().unwrap();
    let mut rejected = false;
    if kl_mu > 10.0 * cfg.epsilon_mu || kl_sigma > 10.0 * cfg.epsilon_sigma {
        policy.net.params.data.copy_from_slice(&snapshot);
        if kl_mu > 10.0 * cfg.epsilon_mu {
            duals.lambda_mu = (duals.lambda_mu * 10.0).clamp(0.0, LAMBDA_MAX);
        }
        if kl_sigma > 10.0 * cfg.epsilon_sigma {
            duals.lambda_sigma = (duals.lambda_sigma * 10.0).clamp(0.0, LAMBDA_MAX);
        }
        rejected = true;
    }
    Ok(MStepOutcome { kl_mu, kl_sigma, wll_trace, rejected })
}

/// Per-round improvement state: warm-started temperature, persistent
/// multipliers, and the policy optimizer.
pub struct MpoImprover {
    pub cfg: MpoConfig,
    eta: f64,
    duals: MStepDuals,
    opt: Adam,
}

impl MpoImprover {
    pub fn new(cfg: MpoConfig, policy_param_count: usize) -> Self {
        let opt = Adam::new(cfg.lr, policy_param_count);
        MpoImprover { cfg, eta: f64::NAN, duals: MStepDuals::default(), opt }
    }
}

impl Improver for MpoImprover {
    fn improve(
        &mut self,
        replay: &ReplayBuffer,
        critic: &MlpNet,
        policy: &mut GaussianPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<ImproveDiag> {
        let kk = self.cfg.estep_states;
        let nn = self.cfg.n_action_samples;
        let batch = replay.sample(rng, kk)?;
        let obs_dim = batch[0].obs.len();
        let mut states = Array2::zeros((kk, obs_dim));
        for (r, tr) in batch.iter().enumerate() {
            for (c, v) in tr.obs.iter().enumerate() {
                states[[r, c]] = *v;
            }
        }

        let (mean, std) = policy.dist(&states)?;
        let act_dim = policy.action_dim;
        let mut actions = Array2::zeros((kk * nn, act_dim));
        for j in 0..kk {
            for i in 0..nn {
                for c in 0..act_dim {
                    let z: f64 = StandardNormal.sample(rng);
                    actions[[j * nn + i, c]] = mean[[j, c]] + std[[j, c]] * z;
                }
            }
        }

        // The critic stores the KL-shifted value; the shift is constant per
        // state, so both the softmax weights and the dual minimizer are
        // unchanged by it and the shifted value feeds the E-step directly.
        let states_rep = repeat_rows(&states, nn);
        let q = critic.forward(&critic_input(&states_rep, &actions))?;
        let q_table = Array2::from_shape_vec(
            (kk, nn),
            q.index_axis(Axis(1), 0).to_vec(),
        )
        .expect("Q reshape");

        let warm = if self.eta.is_finite() { Some(self.eta) } else { None };
        let estep = match e_step_weights(&q_table, self.cfg.epsilon, warm) {
            Ok(r) => r,
            // A failed dual solve falls back to the previous temperature.
            Err(CoreError::Numeric(_)) if self.eta.is_finite() => EStepResult {
                weights: softmax_rows(&q_table, self.eta),
                eta: self.eta,
                kl_to_uniform: f64::NAN,
            },
            Err(e) => return Err(e),
        };
        self.eta = estep.eta;

        let outcome = m_step(
            &states,
            &actions,
            &estep.weights,
            policy,
            &self.cfg,
            &mut self.opt,
            &mut self.duals,
        )?;
        Ok(ImproveDiag { eta: estep.eta, kl_mu: outcome.kl_mu, kl_sigma: outcome.kl_sigma })
    }
}

fn build_networks(
    env_set: &EnvSet,
    cfg: &MpoConfig,
    seed: u64,
) -> Result<(GaussianPolicy, MlpNet)> {
    let obs_dim = env_set.domain().observation_dim();
    let act_dim = env_set.domain().action_dim();
    let head = PolicyHeadConfig {
        tanh_on_mean: false,
        min_variance: cfg.min_variance,
        action_scale: 1.0,
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
    Ok((policy, critic))
}

/// Full MPO training under the given robustness spec, acting in the nominal
/// environment.
pub fn train(
    env_set: &EnvSet,
    spec: &RobustnessSpec,
    cfg: &MpoConfig,
    episodes: usize,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let (policy, critic) = build_networks(env_set, cfg, seed)?;
    let mut improver = MpoImprover::new(cfg.clone(), policy.net.params.len());
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

/// As [`train`] with an explicit uncertainty set, e.g. transition models
/// fitted to offline data. Acting experience still comes from the nominal
/// simulator; only the TD-target fan-out sees `models`.
pub fn train_with_models(
    env_set: &EnvSet,
    models: &mut [Box<dyn DynamicsModel>],
    spec: &RobustnessSpec,
    cfg: &MpoConfig,
    episodes: usize,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let (policy, critic) = build_networks(env_set, cfg, seed)?;
    let mut improver = MpoImprover::new(cfg.clone(), policy.net.params.len());
    run_training_with_models(
        env_set,
        models,
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

/// Domain randomization restricted to the training perturbations: each
/// episode acts in a uniform draw from the training set and the critic
/// regresses to the model-averaged target, which carries the same gradient
/// as averaging the per-model TD errors.
pub fn limited_dr_train(
    env_set: &EnvSet,
    cfg: &MpoConfig,
    episodes: usize,
    seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = env_set.n_models();
    let spec = RobustnessSpec::new(
        RobustnessMode::SoftRobust,
        Objective::Expected,
        0.0,
        vec![1.0 / n as f64; n],
        env_set.nominal_index,
    )?;
    let (policy, critic) = build_networks(env_set, cfg, seed)?;
    let mut improver = MpoImprover::new(cfg.clone(), policy.net.params.len());
    run_training(
        env_set,
        &spec,
        &cfg.schedule,
        episodes,
        policy,
        critic,
        &mut improver,
        ActingScheme::UniformTraining,
        seed,
    )
}
