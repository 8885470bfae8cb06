//! Parameter and state records for the control domains.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Episode horizon used by the training and evaluation loops.
pub const DEFAULT_EPISODE_STEPS: usize = 500;

/// Cart rail half-length in meters; the cart stops dead at the ends.
pub const RAIL_LIMIT: f64 = 2.4;

/// Control domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    PendulumSwingup,
    CartpoleBalance,
    CartpoleSwingup,
}

impl Domain {
    pub fn observation_dim(self) -> usize {
        match self {
            Domain::PendulumSwingup => 3,
            Domain::CartpoleBalance | Domain::CartpoleSwingup => 5,
        }
    }

    /// Every domain drives a single scalar actuator.
    pub fn action_dim(self) -> usize {
        1
    }

    /// Physical quantity the uncertainty-set grids vary by default:
    /// bob mass for the pendulum, pole length for the cartpole tasks.
    pub fn default_perturbation(self) -> PerturbedParam {
        match self {
            Domain::PendulumSwingup => PerturbedParam::BallMass,
            Domain::CartpoleBalance | Domain::CartpoleSwingup => PerturbedParam::PoleLength,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum_swingup" => Ok(Domain::PendulumSwingup),
            "cartpole_balance" => Ok(Domain::CartpoleBalance),
            "cartpole_swingup" => Ok(Domain::CartpoleSwingup),
            other => Err(CoreError::Config(format!("unknown domain '{other}'"))),
        }
    }
}

/// Parameter a model grid perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbedParam {
    BallMass,
    PoleLength,
}

/// Physical constants of one model instance.
///
/// `pole_length` is the full pole length; the cartpole equations internally
/// use the half-length. `actuation_limit` is a torque (N·m) for the pendulum
/// and a horizontal force (N) for the cartpole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub domain: Domain,
    pub pole_length: f64,
    pub ball_mass: f64,
    pub cart_mass: f64,
    pub gravity: f64,
    /// Integrator substep in seconds; one env step runs `frame_skip` substeps.
    pub dt: f64,
    pub frame_skip: u32,
    pub actuation_limit: f64,
}

impl EnvParams {
    pub fn defaults(domain: Domain) -> Self {
        let actuation_limit = match domain {
            // Well below the maximum gravity torque, so swinging up
            // requires pumping energy over several swings.
            Domain::PendulumSwingup => 3.0,
            Domain::CartpoleBalance | Domain::CartpoleSwingup => 10.0,
        };
        EnvParams {
            domain,
            pole_length: 1.0,
            ball_mass: match domain {
                Domain::PendulumSwingup => 1.0,
                _ => 0.1,
            },
            cart_mass: 1.0,
            gravity: 9.81,
            dt: 0.01,
            frame_skip: 2,
            actuation_limit,
        }
    }

    pub fn with_perturbation(mut self, param: PerturbedParam, value: f64) -> Self {
        match param {
            PerturbedParam::BallMass => self.ball_mass = value,
            PerturbedParam::PoleLength => self.pole_length = value,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pole_length", self.pole_length),
            ("ball_mass", self.ball_mass),
            ("cart_mass", self.cart_mass),
            ("gravity", self.gravity),
            ("actuation_limit", self.actuation_limit),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(CoreError::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.dt > 0.0 && self.dt <= 0.05) {
            return Err(CoreError::Domain(format!("dt must lie in (0, 0.05], got {}", self.dt)));
        }
        if self.frame_skip == 0 {
            return Err(CoreError::Domain("frame_skip must be at least 1".into()));
        }
        Ok(())
    }
}

/// Generalized positions and velocities. Angles are measured from upright
/// and wrapped to (-pi, pi] by the dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EnvState {
    Pendulum { theta: f64, theta_dot: f64, step_count: u64 },
    Cartpole { x: f64, theta: f64, x_dot: f64, theta_dot: f64, step_count: u64 },
}

impl EnvState {
    pub fn step_count(&self) -> u64 {
        match *self {
            EnvState::Pendulum { step_count, .. } => step_count,
            EnvState::Cartpole { step_count, .. } => step_count,
        }
    }

    pub fn is_finite(&self) -> bool {
        match *self {
            EnvState::Pendulum { theta, theta_dot, .. } => {
                theta.is_finite() && theta_dot.is_finite()
            }
            EnvState::Cartpole { x, theta, x_dot, theta_dot, .. } => {
                x.is_finite() && theta.is_finite() && x_dot.is_finite() && theta_dot.is_finite()
            }
        }
    }

    pub fn matches(&self, domain: Domain) -> bool {
        matches!(
            (self, domain),
            (EnvState::Pendulum { .. }, Domain::PendulumSwingup)
                | (EnvState::Cartpole { .. }, Domain::CartpoleBalance)
                | (EnvState::Cartpole { .. }, Domain::CartpoleSwingup)
        )
    }

    /// Motionless default state: hanging for the swing-up tasks, upright for
    /// balance.
    pub(crate) fn rest(domain: Domain) -> Self {
        match domain {
            Domain::PendulumSwingup => EnvState::Pendulum {
                theta: std::f64::consts::PI,
                theta_dot: 0.0,
                step_count: 0,
            },
            Domain::CartpoleBalance => {
                EnvState::Cartpole { x: 0.0, theta: 0.0, x_dot: 0.0, theta_dot: 0.0, step_count: 0 }
            }
            Domain::CartpoleSwingup => EnvState::Cartpole {
                x: 0.0,
                theta: std::f64::consts::PI,
                x_dot: 0.0,
                theta_dot: 0.0,
                step_count: 0,
            },
        }
    }
}

/// Stock uncertainty-set grid for a domain: pendulum bob masses in kg,
/// cartpole pole lengths in meters.
pub fn default_training_values(domain: Domain) -> &'static [f64] {
    match domain {
        Domain::PendulumSwingup => &[1.0, 1.1, 1.4],
        Domain::CartpoleBalance => &[0.5, 1.9, 2.1],
        Domain::CartpoleSwingup => &[1.0, 1.4, 1.7],
    }
}

/// Stock held-out evaluation grid matching [`default_training_values`].
pub fn default_holdout_values(domain: Domain) -> &'static [f64] {
    match domain {
        Domain::PendulumSwingup => &[1.5, 1.6, 1.7],
        Domain::CartpoleBalance => &[2.0, 2.2, 2.3],
        Domain::CartpoleSwingup => &[1.2, 1.5, 1.8],
    }
}
