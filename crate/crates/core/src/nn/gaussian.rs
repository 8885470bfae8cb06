//! Diagonal Gaussians: the policy head, densities, and closed-form KL.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::mlp::{MlpNet, MlpSpec, ParamVars};
use super::tape::{Tape, Var};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A single diagonal Gaussian with strictly positive scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Array1<f64>, std: Array1<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(CoreError::Shape("mean and std lengths differ".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Domain("non-finite mean".into()));
        }
        if std.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(CoreError::Domain("std must be strictly positive and finite".into()));
        }
        Ok(DiagGaussian { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &Array1<f64>) -> f64 {
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for i in 0..self.dim() {
            let z = (x[i] - self.mean[i]) / self.std[i];
            quad += z * z;
            logdet += self.std[i].ln();
        }
        -0.5 * quad - logdet - 0.5 * self.dim() as f64 * LN_2PI
    }

    /// Reparameterized draw: `mean + std ⊙ noise`.
    pub fn sample(&self, noise: &Array1<f64>) -> Array1<f64> {
        &self.mean + &(&self.std * noise)
    }

    pub fn entropy(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum::<f64>() + 0.5 * self.dim() as f64 * (1.0 + LN_2PI)
    }
}

/// Full KL(p || q); equals `gaussian_kl_mean + gaussian_kl_cov`.
pub fn gaussian_kl(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    gaussian_kl_mean(p, q) + gaussian_kl_cov(p, q)
}

/// Mean term of KL(p || q): half the q-whitened squared mean gap.
pub fn gaussian_kl_mean(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let z = (p.mean[i] - q.mean[i]) / q.std[i];
        acc += z * z;
    }
    0.5 * acc
}

/// Covariance term of KL(p || q).
pub fn gaussian_kl_cov(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut acc = 0.0;
    for i in 0..p.dim() {
        let r = p.std[i] / q.std[i];
        acc += q.std[i].ln() - p.std[i].ln() + 0.5 * (r * r - 1.0);
    }
    acc
}

/// Row-wise KL between two batches of diagonal Gaussians.
pub fn batch_kl(
    mean_p: &Array2<f64>,
    std_p: &Array2<f64>,
    mean_q: &Array2<f64>,
    std_q: &Array2<f64>,
) -> Array1<f64> {
    let n = mean_p.nrows();
    let d = mean_p.ncols();
    let mut out = Array1::zeros(n);
    for row in 0..n {
        let mut acc = 0.0;
        for i in 0..d {
            let z = (mean_p[[row, i]] - mean_q[[row, i]]) / std_q[[row, i]];
            let r = std_p[[row, i]] / std_q[[row, i]];
            acc += 0.5 * z * z + std_q[[row, i]].ln() - std_p[[row, i]].ln()
                + 0.5 * (r * r - 1.0);
        }
        out[row] = acc;
    }
    out
}

/// Head transform configuration.
///
/// The scale path is `softplus(raw)` squared plus `min_variance`, so the
/// produced variance can never fall below the floor. With the floor at zero
/// the square/sqrt pair is skipped and the scale is `softplus(raw)` directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyHeadConfig {
    pub tanh_on_mean: bool,
    pub min_variance: f64,
    /// Multiplies the squashed mean; the actuator limit when tanh is on.
    pub action_scale: f64,
    /// Approximate per-dimension std right after initialization.
    pub init_std: f64,
}

impl Default for PolicyHeadConfig {
    fn default() -> Self {
        PolicyHeadConfig { tanh_on_mean: false, min_variance: 0.0, action_scale: 1.0, init_std: 0.3 }
    }
}

impl PolicyHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.min_variance.is_finite() || self.min_variance < 0.0 {
            return Err(CoreError::Config("min_variance must be >= 0".into()));
        }
        if !(self.action_scale > 0.0) || !(self.init_std > 0.0) {
            return Err(CoreError::Config("action_scale and init_std must be positive".into()));
        }
        Ok(())
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn inv_softplus(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y.exp_m1().ln()
}

/// Stochastic policy: an MLP trunk whose output splits into a mean half and
/// a pre-softplus scale half.
#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub net: MlpNet,
    pub action_dim: usize,
    pub head: PolicyHeadConfig,
}

impl GaussianPolicy {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        spec: MlpSpec,
        head: PolicyHeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        head.validate()?;
        if action_dim == 0 {
            return Err(CoreError::Config("action_dim must be positive".into()));
        }
        let mut net = MlpNet::new(obs_dim, 2 * action_dim, spec, rng)?;
        // Bias the scale half so the initial std lands near init_std (or just
        // above the variance floor when the floor exceeds the target).
        let target_sq = (head.init_std * head.init_std - head.min_variance).max(1e-6);
        let raw = inv_softplus(target_sq.sqrt());
        let b_out = net.params.index_of("b_out").expect("output bias exists");
        let mut bias = net.params.view_mut(b_out);
        for i in action_dim..2 * action_dim {
            bias[[0, i]] = raw;
        }
        Ok(GaussianPolicy { net, action_dim, head })
    }

    fn transform(&self, raw: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.action_dim;
        let mean_raw = raw.slice(ndarray::s![.., ..d]);
        let std_raw = raw.slice(ndarray::s![.., d..]);
        let mean = if self.head.tanh_on_mean {
            mean_raw.mapv(|m| self.head.action_scale * m.tanh())
        } else {
            mean_raw.to_owned()
        };
        let std = if self.head.min_variance == 0.0 {
            std_raw.mapv(softplus_scalar)
        } else {
            std_raw.mapv(|r| {
                let s = softplus_scalar(r);
                (s * s + self.head.min_variance).sqrt()
            })
        };
        (mean, std)
    }

    /// Batched (mean, std), both `n x action_dim`.
    pub fn dist(&self, obs: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let raw = self.net.forward(obs)?;
        Ok(self.transform(&raw))
    }

    /// Distribution at a single observation.
    pub fn dist_single(&self, obs: &[f64]) -> Result<DiagGaussian> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec())
            .map_err(|e| CoreError::Shape(e.to_string()))?;
        let (mean, std) = self.dist(&x)?;
        DiagGaussian::new(mean.row(0).to_owned(), std.row(0).to_owned())
    }

    /// Records the head on a tape: returns (mean, std, parameter leaves).
    pub fn dist_on<'t>(
        &self,
        tape: &'t Tape,
        obs: &Array2<f64>,
    ) -> Result<(Var<'t>, Var<'t>, ParamVars<'t>)> {
        let (out, leaves) = self.net.forward_on(tape, obs)?;
        let (mean, std) = self.transform_on(out);
        Ok((mean, std, leaves))
    }

    /// As [`dist_on`](Self::dist_on) but forwarding through an existing set
    /// of parameter leaves, so several head evaluations in one loss share
    /// their gradients.
    pub fn dist_from<'t>(
        &self,
        tape: &'t Tape,
        obs: &Array2<f64>,
        leaves: &ParamVars<'t>,
    ) -> (Var<'t>, Var<'t>) {
        let out = self.net.forward_from(tape.leaf(obs.clone()), &leaves.vars);
        self.transform_on(out)
    }

    /// Head transform applied to an already-recorded trunk output.
    pub fn transform_on<'t>(&self, out: Var<'t>) -> (Var<'t>, Var<'t>) {
        let d = self.action_dim;
        let mean_raw = out.slice_cols(0, d);
        let std_raw = out.slice_cols(d, 2 * d);
        let mean = if self.head.tanh_on_mean {
            mean_raw.tanh().scale(self.head.action_scale)
        } else {
            mean_raw
        };
        let std = if self.head.min_variance == 0.0 {
            std_raw.softplus()
        } else {
            std_raw.softplus().square().add_scalar(self.head.min_variance).sqrt()
        };
        (mean, std)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "obs_dim": self.net.input_dim,
            "action_dim": self.action_dim,
            "spec": self.net.spec,
            "head": self.head,
        });
        let header = super::checkpoint::CheckpointHeader {
            kind: "policy".into(),
            meta,
            n_params: self.net.params.len(),
        };
        super::checkpoint::save_checkpoint(path, &header, &self.net.params.data)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (header, data) = super::checkpoint::load_checkpoint(path)?;
        if header.kind != "policy" {
            return Err(CoreError::Config(format!(
                "checkpoint holds a {:?}, not a policy",
                header.kind
            )));
        }
        let obs_dim: usize = serde_json::from_value(header.meta["obs_dim"].clone())?;
        let action_dim: usize = serde_json::from_value(header.meta["action_dim"].clone())?;
        let spec: MlpSpec = serde_json::from_value(header.meta["spec"].clone())?;
        let head: PolicyHeadConfig = serde_json::from_value(header.meta["head"].clone())?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut policy = GaussianPolicy::new(obs_dim, action_dim, spec, head, &mut rng)?;
        if policy.net.params.len() != data.len() {
            return Err(CoreError::Shape(format!(
                "checkpoint has {} parameters, the layout needs {}",
                data.len(),
                policy.net.params.len()
            )));
        }
        policy.net.params.data = data;
        Ok(policy)
    }
}

/// Row-wise log density of `actions` under (mean, std) nodes: `n x 1`.
pub fn log_prob_on<'t>(actions: Var<'t>, mean: Var<'t>, std: Var<'t>) -> Var<'t> {
    let d = mean.dim().1 as f64;
    let z = actions.sub(mean).div(std);
    let quad = z.square().sum_rows().scale(-0.5);
    let logdet = std.ln().sum_rows();
    quad.sub(logdet).add_scalar(-0.5 * d * LN_2PI)
}

/// Row-wise entropy of diagonal Gaussians with the given scales: `n x 1`.
pub fn entropy_on<'t>(std: Var<'t>) -> Var<'t> {
    let d = std.dim().1 as f64;
    std.ln().sum_rows().add_scalar(0.5 * d * (1.0 + LN_2PI))
}

/// Row-wise mean term of KL(p || q): `n x 1`. Differentiable through
/// whichever arguments are tape-recorded; the other side enters as leaves.
pub fn kl_mean_on<'t>(mean_p: Var<'t>, mean_q: Var<'t>, std_q: Var<'t>) -> Var<'t> {
    mean_p.sub(mean_q).div(std_q).square().sum_rows().scale(0.5)
}

/// Row-wise covariance term of KL(p || q): `n x 1`.
pub fn kl_cov_on<'t>(std_p: Var<'t>, std_q: Var<'t>) -> Var<'t> {
    let log_ratio = std_q.ln().sub(std_p.ln());
    let r2 = std_p.div(std_q).square();
    log_ratio.add(r2.add_scalar(-1.0).scale(0.5)).sum_rows()
}

/// Row-wise mean term of KL(p || q) between batched diagonals.
pub fn batch_kl_mean(
    mean_p: &Array2<f64>,
    mean_q: &Array2<f64>,
    std_q: &Array2<f64>,
) -> Array1<f64> {
    let mut out = Array1::zeros(mean_p.nrows());
    for row in 0..mean_p.nrows() {
        let mut acc = 0.0;
        for i in 0..mean_p.ncols() {
            let z = (mean_p[[row, i]] - mean_q[[row, i]]) / std_q[[row, i]];
            acc += z * z;
        }
        out[row] = 0.5 * acc;
    }
    out
}

/// Row-wise covariance term of KL(p || q) between batched diagonals.
pub fn batch_kl_cov(std_p: &Array2<f64>, std_q: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(std_p.nrows());
    for row in 0..std_p.nrows() {
        let mut acc = 0.0;
        for i in 0..std_p.ncols() {
            let r = std_p[[row, i]] / std_q[[row, i]];
            acc += std_q[[row, i]].ln() - std_p[[row, i]].ln() + 0.5 * (r * r - 1.0);
        }
        out[row] = acc;
    }
    out
}
