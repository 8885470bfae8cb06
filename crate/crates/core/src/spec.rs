//! How an uncertainty set is aggregated and whether values carry a KL
//! penalty toward a reference policy.
//!
//! The same two switches drive the tabular operators and the TD targets of
//! the continuous trainers, so they live in one place.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Aggregation over the members of an uncertainty set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustnessMode {
    /// Nominal member only.
    NonRobust,
    /// Worst case (minimum) over members.
    Robust,
    /// Weighted average over members.
    SoftRobust,
}

/// Whether backed-up values include the KL penalty toward a reference policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Expected,
    EntropyRegularized,
}

/// Full description of how targets are aggregated in continuous training.
///
/// `weights` has one entry per uncertainty-set member and is only consulted
/// in soft-robust mode; `nominal_index` selects the member used in
/// non-robust mode. `tau` is only consulted when the objective is
/// entropy-regularized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessSpec {
    pub mode: RobustnessMode,
    pub objective: Objective,
    pub tau: f64,
    pub weights: Vec<f64>,
    pub nominal_index: usize,
}

impl RobustnessSpec {
    pub fn new(
        mode: RobustnessMode,
        objective: Objective,
        tau: f64,
        weights: Vec<f64>,
        nominal_index: usize,
    ) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(CoreError::Domain(format!("tau must be finite and >= 0, got {tau}")));
        }
        validate_weights(&weights)?;
        if nominal_index >= weights.len() {
            return Err(CoreError::Shape(format!(
                "nominal_index {nominal_index} out of range for {} members",
                weights.len()
            )));
        }
        Ok(Self { mode, objective, tau, weights, nominal_index })
    }

    /// Uniform weights over `n` members, nominal at index 0.
    pub fn uniform(mode: RobustnessMode, objective: Objective, tau: f64, n: usize) -> Result<Self> {
        Self::new(mode, objective, tau, vec![1.0 / n as f64; n], 0)
    }

    /// Effective KL coefficient: zero unless the objective is regularized.
    pub fn effective_tau(&self) -> f64 {
        match self.objective {
            Objective::Expected => 0.0,
            Objective::EntropyRegularized => self.tau,
        }
    }
}

/// Weights must form a probability vector.
pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(CoreError::Shape("weights must be non-empty".into()));
    }
    let mut sum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() || *w < 0.0 {
            return Err(CoreError::Domain(format!("weight[{i}] = {w} not a probability")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::Domain(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_tau() {
        assert!(RobustnessSpec::new(
            RobustnessMode::Robust,
            Objective::EntropyRegularized,
            -0.1,
            vec![1.0],
            0
        )
        .is_err());
    }

    #[test]
    fn rejects_non_simplex_weights() {
        assert!(validate_weights(&[0.5, 0.6]).is_err());
        assert!(validate_weights(&[-0.1, 1.1]).is_err());
        assert!(validate_weights(&[]).is_err());
    }

    #[test]
    fn expected_objective_masks_tau() {
        let s = RobustnessSpec::uniform(RobustnessMode::Robust, Objective::Expected, 0.7, 2)
            .unwrap();
        assert_eq!(s.effective_tau(), 0.0);
    }
}
