//! Reverse-mode autodiff and the small network stack built on it.
//!
//! The tape records matrix ops into an arena; [`MlpNet`] owns a flat
//! parameter vector and can run either a plain forward pass or record one
//! for gradients. Gaussian heads, Adam, and the checkpoint format live here
//! too so every learner shares one differentiation path.

mod adam;
mod checkpoint;
mod gaussian;
mod mlp;
mod tape;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use gaussian::{
    batch_kl, batch_kl_cov, batch_kl_mean, entropy_on, gaussian_kl, gaussian_kl_cov,
    gaussian_kl_mean, kl_cov_on, kl_mean_on, log_prob_on, DiagGaussian, GaussianPolicy,
    PolicyHeadConfig, LN_2PI,
};
pub use mlp::{Activation, MlpNet, MlpSpec, ParamEntry, ParamVars, ParamVector};
pub use tape::{Gradients, Tape, Var};
