use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::types::{TabularMdp, UncertaintySet};

/// On-disk description of an MDP plus its uncertainty set.
///
/// Layout: `reward[s][a]`, `kernels[k][s][a][s']`, `weights[k]`. All
/// structural constraints are re-checked on load; a file that parses but
/// violates them is rejected with a config error.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub reward: Vec<Vec<f64>>,
    pub kernels: Vec<Vec<Vec<Vec<f64>>>>,
    pub weights: Vec<f64>,
}

impl MdpDocument {
    pub fn from_parts(mdp: &TabularMdp, uset: &UncertaintySet) -> Self {
        let reward = (0..mdp.n_states)
            .map(|s| (0..mdp.n_actions).map(|a| mdp.reward[[s, a]]).collect())
            .collect();
        let kernels = uset
            .kernels
            .iter()
            .map(|k| {
                (0..mdp.n_states)
                    .map(|s| {
                        (0..mdp.n_actions)
                            .map(|a| (0..mdp.n_states).map(|t| k[[s, a, t]]).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            discount: mdp.discount,
            reward,
            kernels,
            weights: uset.weights.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(TabularMdp, UncertaintySet)> {
        let flat_reward = flatten2(&self.reward, self.n_states, self.n_actions, "reward")?;
        let reward = Array2::from_shape_vec((self.n_states, self.n_actions), flat_reward)
            .map_err(|e| CoreError::Shape(e.to_string()))?;
        let mdp = TabularMdp::new(reward, self.discount)?;
        let mut kernels = Vec::with_capacity(self.kernels.len());
        for (idx, k) in self.kernels.iter().enumerate() {
            let mut flat = Vec::with_capacity(self.n_states * self.n_actions * self.n_states);
            if k.len() != self.n_states {
                return Err(CoreError::Shape(format!(
                    "kernel {idx} has {} state rows, expected {}",
                    k.len(),
                    self.n_states
                )));
            }
            for row_s in k {
                if row_s.len() != self.n_actions {
                    return Err(CoreError::Shape(format!(
                        "kernel {idx} has a state with {} action rows",
                        row_s.len()
                    )));
                }
                for row_a in row_s {
                    if row_a.len() != self.n_states {
                        return Err(CoreError::Shape(format!(
                            "kernel {idx} has a probability row of length {}",
                            row_a.len()
                        )));
                    }
                    flat.extend_from_slice(row_a);
                }
            }
            kernels.push(
                Array3::from_shape_vec((self.n_states, self.n_actions, self.n_states), flat)
                    .map_err(|e| CoreError::Shape(e.to_string()))?,
            );
        }
        let uset = UncertaintySet::new(kernels, self.weights)?;
        uset.check_compatible(&mdp)?;
        Ok((mdp, uset))
    }
}

fn flatten2(rows: &[Vec<f64>], n_rows: usize, n_cols: usize, what: &str) -> Result<Vec<f64>> {
    if rows.len() != n_rows {
        return Err(CoreError::Shape(format!(
            "{what} has {} rows, expected {n_rows}",
            rows.len()
        )));
    }
    let mut flat = Vec::with_capacity(n_rows * n_cols);
    for row in rows {
        if row.len() != n_cols {
            return Err(CoreError::Shape(format!(
                "{what} has a row of length {}, expected {n_cols}",
                row.len()
            )));
        }
        flat.extend_from_slice(row);
    }
    Ok(flat)
}

pub fn save_mdp_json(path: &Path, mdp: &TabularMdp, uset: &UncertaintySet) -> Result<()> {
    let doc = MdpDocument::from_parts(mdp, uset);
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_mdp_json(path: &Path) -> Result<(TabularMdp, UncertaintySet)> {
    let text = std::fs::read_to_string(path)?;
    let doc: MdpDocument = serde_json::from_str(&text)
        .map_err(|e| CoreError::Config(format!("malformed MDP file {}: {e}", path.display())))?;
    doc.into_parts()
}
