use ndarray::{Array1, Array2, Array3};

use crate::error::{CoreError, Result};
use crate::spec::validate_weights;

/// State values, one entry per state.
pub type ValueFunction = Array1<f64>;

/// Finite MDP without transitions; kernels live in [`UncertaintySet`].
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `reward[[s, a]]`, finite.
    pub reward: Array2<f64>,
    /// Discount in (0, 1).
    pub discount: f64,
}

impl TabularMdp {
    pub fn new(reward: Array2<f64>, discount: f64) -> Result<Self> {
        let (n_states, n_actions) = reward.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(CoreError::Shape("reward table must be non-empty".into()));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(CoreError::Domain("reward table contains non-finite entries".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(CoreError::Domain(format!("discount must lie in (0, 1), got {discount}")));
        }
        Ok(Self { n_states, n_actions, reward, discount })
    }
}

/// Finite set of transition kernels over a common state-action space.
///
/// Kernel rows are probability vectors; inputs may be off by up to 1e-9 and
/// are renormalized on construction, so stored rows sum to 1 within a few
/// ulp. Kernel 0 doubles as the nominal kernel in non-robust mode.
#[derive(Debug, Clone)]
pub struct UncertaintySet {
    /// `kernels[k][[s, a, s']]`.
    pub kernels: Vec<Array3<f64>>,
    /// Probability vector over kernels, used by soft-robust aggregation.
    pub weights: Vec<f64>,
}

impl UncertaintySet {
    pub fn new(kernels: Vec<Array3<f64>>, weights: Vec<f64>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(CoreError::Shape("uncertainty set must contain a kernel".into()));
        }
        if weights.len() != kernels.len() {
            return Err(CoreError::Shape(format!(
                "{} weights for {} kernels",
                weights.len(),
                kernels.len()
            )));
        }
        validate_weights(&weights)?;
        let dim = kernels[0].dim();
        if dim.0 != dim.2 {
            return Err(CoreError::Shape(format!(
                "kernel maps {} states onto {} states",
                dim.0, dim.2
            )));
        }
        let mut kernels = kernels;
        for (k, kernel) in kernels.iter_mut().enumerate() {
            if kernel.dim() != dim {
                return Err(CoreError::Shape(format!("kernel {k} has mismatched shape")));
            }
            for s in 0..dim.0 {
                for a in 0..dim.1 {
                    let mut row = kernel.slice_mut(ndarray::s![s, a, ..]);
                    let mut sum = 0.0;
                    for p in row.iter() {
                        if !p.is_finite() || *p < 0.0 {
                            return Err(CoreError::Domain(format!(
                                "kernel {k} row ({s}, {a}) has entry {p}"
                            )));
                        }
                        sum += p;
                    }
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(CoreError::Domain(format!(
                            "kernel {k} row ({s}, {a}) sums to {sum}"
                        )));
                    }
                    row.mapv_inplace(|p| p / sum);
                }
            }
        }
        Ok(Self { kernels, weights })
    }

    /// Singleton set around one kernel.
    pub fn singleton(kernel: Array3<f64>) -> Result<Self> {
        Self::new(vec![kernel], vec![1.0])
    }

    pub fn n_kernels(&self) -> usize {
        self.kernels.len()
    }

    pub fn n_states(&self) -> usize {
        self.kernels[0].dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.kernels[0].dim().1
    }

    /// Weighted average kernel; the soft-robust operator is the nominal
    /// operator of this kernel.
    pub fn average_kernel(&self) -> Array3<f64> {
        let mut avg = Array3::zeros(self.kernels[0].dim());
        for (w, kernel) in self.weights.iter().zip(&self.kernels) {
            avg.scaled_add(*w, kernel);
        }
        avg
    }

    /// Shape compatibility with an MDP.
    pub fn check_compatible(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states() != mdp.n_states || self.n_actions() != mdp.n_actions {
            return Err(CoreError::Shape(format!(
                "uncertainty set is {}x{}, MDP is {}x{}",
                self.n_states(),
                self.n_actions(),
                mdp.n_states,
                mdp.n_actions
            )));
        }
        Ok(())
    }
}

/// Stochastic stationary policy; rows are probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    /// `probs[[s, a]]`.
    pub probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let (n_states, n_actions) = probs.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(CoreError::Shape("policy table must be non-empty".into()));
        }
        let mut probs = probs;
        for s in 0..n_states {
            let mut row = probs.row_mut(s);
            let mut sum = 0.0;
            for p in row.iter() {
                if !p.is_finite() || *p < 0.0 {
                    return Err(CoreError::Domain(format!("policy row {s} has entry {p}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CoreError::Domain(format!("policy row {s} sums to {sum}")));
            }
            row.mapv_inplace(|p| p / sum);
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }

    /// Deterministic policy from an action index per state.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(CoreError::Shape(format!("action {a} out of range in state {s}")));
            }
            probs[[s, a]] = 1.0;
        }
        Ok(Self { probs })
    }
}

/// KL penalty strength and the reference policy it is measured against.
#[derive(Debug, Clone)]
pub struct RegularizationSpec {
    /// `tau >= 0`; zero disables the penalty entirely.
    pub tau: f64,
    pub reference: TabularPolicy,
}

impl RegularizationSpec {
    pub fn new(tau: f64, reference: TabularPolicy) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(CoreError::Domain(format!("tau must be finite and >= 0, got {tau}")));
        }
        Ok(Self { tau, reference })
    }

    /// Unregularized backup with a uniform placeholder reference.
    pub fn none(n_states: usize, n_actions: usize) -> Self {
        Self { tau: 0.0, reference: TabularPolicy::uniform(n_states, n_actions) }
    }
}
