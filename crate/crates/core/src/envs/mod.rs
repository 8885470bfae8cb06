//! Purpose-built pendulum swing-up and cart-pole (balance and swing-up)
//! physics with perturbable parameters and settable state.
//!
//! These stand in for external simulator tasks: small frictionless rigid-body
//! systems under semi-implicit Euler, chosen so that worst-case transition
//! queries (set a state on every model in the uncertainty set, step each one)
//! are cheap and bit-deterministic. Uncertainty sets are grids over one
//! physical parameter per domain; see [`make_env_set`].

mod model;
mod reward;
mod types;

pub use model::{
    make_env_set, make_env_set_perturbing, observation, wrap_angle, DynamicsModel, EnvModel,
    EnvSet, MAX_ANG_VEL, MAX_CART_VEL,
};
pub use reward::{cartpole_reward, pendulum_reward, tolerance};
pub use types::{
    default_holdout_values, default_training_values, Domain, EnvParams, EnvState, PerturbedParam,
    DEFAULT_EPISODE_STEPS, RAIL_LIMIT,
};
