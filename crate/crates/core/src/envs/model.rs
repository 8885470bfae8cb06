//! Simulator models, the uncertainty-set factory, and the integrators.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::rng::splitmix64;

use super::reward::{cartpole_reward, pendulum_reward};
use super::types::{Domain, EnvParams, EnvState, PerturbedParam, RAIL_LIMIT};

use std::f64::consts::PI;

/// Angular velocity clamp; far above anything a swing-up trajectory needs,
/// it only tames long random-action rollouts. Public so learned transition
/// models can enforce the same state-space invariants as the simulator.
pub const MAX_ANG_VEL: f64 = 4.0 * PI;
pub const MAX_CART_VEL: f64 = 10.0;

/// Wraps an angle to (-pi, pi]. Exact at the boundary: wrap(pi) == pi bitwise.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = PI - (PI - theta).rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2*pi, which would land on -pi.
    if w == -PI {
        PI
    } else {
        w
    }
}

/// One semi-implicit Euler substep of the torque-driven pendulum.
///
/// The gravity term is written as -sin(theta - pi), which equals sin(theta)
/// but is exactly zero at theta = pi, so the hanging state is a true fixed
/// point in floating point and not just up to sin(pi) rounding.
fn pendulum_substep(p: &EnvParams, theta: f64, theta_dot: f64, torque: f64) -> (f64, f64) {
    let grav = -(p.gravity / p.pole_length) * (theta - PI).sin();
    let acc = grav + torque / (p.ball_mass * p.pole_length * p.pole_length);
    let vel = (theta_dot + acc * p.dt).clamp(-MAX_ANG_VEL, MAX_ANG_VEL);
    let pos = wrap_angle(theta + vel * p.dt);
    (pos, vel)
}

/// One semi-implicit Euler substep of the cart-pole.
///
/// Standard pole-on-a-cart equations with the pole treated as a uniform rod
/// (the 4/3 inertia factor), theta measured from upright, force along +x.
/// Running into a rail end stops the cart dead.
fn cartpole_substep(
    p: &EnvParams,
    x: f64,
    theta: f64,
    x_dot: f64,
    theta_dot: f64,
    force: f64,
) -> (f64, f64, f64, f64) {
    let half = 0.5 * p.pole_length;
    let total = p.cart_mass + p.ball_mass;
    let sin = theta.sin();
    let cos = theta.cos();
    let temp = (force + p.ball_mass * half * theta_dot * theta_dot * sin) / total;
    let theta_acc =
        (p.gravity * sin - cos * temp) / (half * (4.0 / 3.0 - p.ball_mass * cos * cos / total));
    let x_acc = temp - p.ball_mass * half * theta_acc * cos / total;

    let new_theta_dot = (theta_dot + theta_acc * p.dt).clamp(-MAX_ANG_VEL, MAX_ANG_VEL);
    let new_x_dot = (x_dot + x_acc * p.dt).clamp(-MAX_CART_VEL, MAX_CART_VEL);
    let new_theta = wrap_angle(theta + new_theta_dot * p.dt);
    let mut new_x = x + new_x_dot * p.dt;
    let mut stopped_x_dot = new_x_dot;
    if new_x.abs() > RAIL_LIMIT {
        new_x = new_x.clamp(-RAIL_LIMIT, RAIL_LIMIT);
        stopped_x_dot = 0.0;
    }
    (new_x, new_theta, stopped_x_dot, new_theta_dot)
}

/// Observation vector: trig-encoded angle so policies never see the wrap
/// discontinuity. Pendulum (cos, sin, theta_dot); cartpole adds cart slide.
pub fn observation(s: &EnvState) -> Vec<f64> {
    match *s {
        EnvState::Pendulum { theta, theta_dot, .. } => vec![theta.cos(), theta.sin(), theta_dot],
        EnvState::Cartpole { x, theta, x_dot, theta_dot, .. } => {
            vec![x, theta.cos(), theta.sin(), x_dot, theta_dot]
        }
    }
}

/// One instantiation of a domain: fixed physical parameters plus the current
/// state. Stepping is pure in (state, action, params); the seeded rng only
/// drives `reset`. Cheap to clone, and clones evolve independently.
#[derive(Debug, Clone)]
pub struct EnvModel {
    pub params: EnvParams,
    state: EnvState,
    rng: ChaCha8Rng,
    pub rng_seed: u64,
}

impl EnvModel {
    pub fn new(params: EnvParams, rng_seed: u64) -> Result<Self> {
        params.validate()?;
        Ok(EnvModel {
            params,
            state: EnvState::rest(params.domain),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rng_seed,
        })
    }

    /// Draws a fresh initial state: pendulum angle uniform over (-pi, pi] at
    /// rest; balance starts near upright; cartpole swing-up starts hanging
    /// with a little angle noise so the exact equilibrium cannot trap a
    /// noiseless policy.
    pub fn reset(&mut self) -> EnvState {
        let state = match self.params.domain {
            Domain::PendulumSwingup => {
                let u: f64 = self.rng.random();
                EnvState::Pendulum { theta: PI - u * 2.0 * PI, theta_dot: 0.0, step_count: 0 }
            }
            Domain::CartpoleBalance => EnvState::Cartpole {
                x: self.rng.random_range(-0.1..0.1),
                theta: self.rng.random_range(-0.05..0.05),
                x_dot: 0.0,
                theta_dot: 0.0,
                step_count: 0,
            },
            Domain::CartpoleSwingup => EnvState::Cartpole {
                x: self.rng.random_range(-0.1..0.1),
                theta: wrap_angle(PI + self.rng.random_range(-0.05..0.05)),
                x_dot: 0.0,
                theta_dot: 0.0,
                step_count: 0,
            },
        };
        self.state = state;
        state
    }

    /// Applies one action for `frame_skip` substeps and returns the next
    /// state plus its reward.
    pub fn step(&mut self, action: &[f64]) -> Result<(EnvState, f64)> {
        if action.len() != 1 {
            return Err(CoreError::Shape(format!(
                "expected a 1-dimensional action, got {}",
                action.len()
            )));
        }
        if !action[0].is_finite() {
            return Err(CoreError::Domain(format!("non-finite action {}", action[0])));
        }
        let u = action[0].clamp(-self.params.actuation_limit, self.params.actuation_limit);

        let next = match self.state {
            EnvState::Pendulum { mut theta, mut theta_dot, step_count } => {
                for _ in 0..self.params.frame_skip {
                    (theta, theta_dot) = pendulum_substep(&self.params, theta, theta_dot, u);
                }
                EnvState::Pendulum { theta, theta_dot, step_count: step_count + 1 }
            }
            EnvState::Cartpole { mut x, mut theta, mut x_dot, mut theta_dot, step_count } => {
                for _ in 0..self.params.frame_skip {
                    (x, theta, x_dot, theta_dot) =
                        cartpole_substep(&self.params, x, theta, x_dot, theta_dot, u);
                }
                EnvState::Cartpole { x, theta, x_dot, theta_dot, step_count: step_count + 1 }
            }
        };
        if !next.is_finite() {
            return Err(CoreError::Physics(format!(
                "state diverged under action {u}: {next:?}"
            )));
        }

        let reward = match next {
            EnvState::Pendulum { theta, .. } => pendulum_reward(theta),
            EnvState::Cartpole { x, theta, .. } => cartpole_reward(self.params.domain, x, theta),
        };
        self.state = next;
        Ok((next, reward))
    }

    /// Overwrites the state bitwise. The wrap invariant on theta is the
    /// caller's responsibility here; states produced by `step` and `reset`
    /// always satisfy it.
    pub fn set_state(&mut self, s: EnvState) -> Result<()> {
        if !s.is_finite() {
            return Err(CoreError::Domain("state must be finite".into()));
        }
        if !s.matches(self.params.domain) {
            return Err(CoreError::Shape(format!(
                "state {s:?} does not fit domain {:?}",
                self.params.domain
            )));
        }
        self.state = s;
        Ok(())
    }

    pub fn get_state(&self) -> EnvState {
        self.state
    }

    pub fn observe(&self) -> Vec<f64> {
        observation(&self.state)
    }

    pub fn domain(&self) -> Domain {
        self.params.domain
    }

    /// Restarts the reset stream; the dynamics themselves carry no noise.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng_seed = seed;
    }
}

/// The generative-model access the TD targets need: jump to an arbitrary
/// stored state and step once. Physical simulators and learned transition
/// models both satisfy it, so the robust fan-out never cares which it got.
pub trait DynamicsModel: Send {
    fn domain(&self) -> Domain;
    fn set_state(&mut self, s: EnvState) -> Result<()>;
    fn step(&mut self, action: &[f64]) -> Result<(EnvState, f64)>;
    fn observe(&self) -> Vec<f64>;
}

impl DynamicsModel for EnvModel {
    fn domain(&self) -> Domain {
        self.params.domain
    }

    fn set_state(&mut self, s: EnvState) -> Result<()> {
        EnvModel::set_state(self, s)
    }

    fn step(&mut self, action: &[f64]) -> Result<(EnvState, f64)> {
        EnvModel::step(self, action)
    }

    fn observe(&self) -> Vec<f64> {
        EnvModel::observe(self)
    }
}

/// The nominal model, the training-set grid it belongs to, and the held-out
/// evaluation grid. `nominal` duplicates `training_set[nominal_index]`.
#[derive(Debug, Clone)]
pub struct EnvSet {
    pub nominal: EnvModel,
    pub nominal_index: usize,
    pub training_set: Vec<EnvModel>,
    pub holdout_set: Vec<EnvModel>,
}

impl EnvSet {
    pub fn domain(&self) -> Domain {
        self.nominal.params.domain
    }

    pub fn n_models(&self) -> usize {
        self.training_set.len()
    }
}

/// Builds an [`EnvSet`] perturbing the domain's default parameter, with the
/// smallest training value as the nominal model.
pub fn make_env_set(
    domain: Domain,
    training_values: &[f64],
    holdout_values: &[f64],
    seed: u64,
) -> Result<EnvSet> {
    make_env_set_perturbing(domain, domain.default_perturbation(), training_values, holdout_values, seed)
}

/// [`make_env_set`] with an explicit choice of perturbed parameter (the
/// extrapolation study perturbs pendulum length instead of mass).
pub fn make_env_set_perturbing(
    domain: Domain,
    param: PerturbedParam,
    training_values: &[f64],
    holdout_values: &[f64],
    seed: u64,
) -> Result<EnvSet> {
    if training_values.is_empty() || holdout_values.is_empty() {
        return Err(CoreError::Config("training and holdout value lists must be non-empty".into()));
    }
    for &v in training_values.iter().chain(holdout_values) {
        if !v.is_finite() || v <= 0.0 {
            return Err(CoreError::Config(format!("perturbation values must be positive, got {v}")));
        }
    }

    let build = |value: f64, index: u64| {
        let params = EnvParams::defaults(domain).with_perturbation(param, value);
        EnvModel::new(params, splitmix64(seed.wrapping_add(index)))
    };
    let training_set: Vec<EnvModel> = training_values
        .iter()
        .enumerate()
        .map(|(i, &v)| build(v, 1 + i as u64))
        .collect::<Result<_>>()?;
    let holdout_set: Vec<EnvModel> = holdout_values
        .iter()
        .enumerate()
        .map(|(i, &v)| build(v, 1_000 + i as u64))
        .collect::<Result<_>>()?;

    let mut nominal_index = 0;
    for (i, &v) in training_values.iter().enumerate() {
        if v < training_values[nominal_index] {
            nominal_index = i;
        }
    }
    Ok(EnvSet { nominal: training_set[nominal_index].clone(), nominal_index, training_set, holdout_set })
}
