//! Dense multilayer perceptrons over a flat parameter vector.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::tape::{Tape, Var};

/// Variance floor inside the layer-norm denominator.
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
}

/// Architecture of one MLP: hidden widths plus the first-layer normalization
/// flags. The stock configuration normalizes the first layer's pre-activation
/// and passes it through tanh; later layers use elu.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub layer_norm_first: bool,
    pub tanh_after_norm: bool,
}

impl MlpSpec {
    pub fn standard(layer_widths: Vec<usize>) -> Self {
        MlpSpec {
            layer_widths,
            activation: Activation::Elu,
            layer_norm_first: true,
            tanh_after_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() {
            return Err(CoreError::Config("need at least one hidden layer".into()));
        }
        if self.layer_widths.iter().any(|w| *w == 0) {
            return Err(CoreError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Shape and offset of one named parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// All parameters of a network as one flat vector plus its layout map.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamVector {
    fn new(entries: Vec<ParamEntry>) -> Self {
        let len = entries.iter().map(|e| e.rows * e.cols).sum();
        ParamVector { data: vec![0.0; len], entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view(&self, index: usize) -> ArrayView2<'_, f64> {
        let e = &self.entries[index];
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.offset..e.offset + e.rows * e.cols])
            .expect("layout entry consistent with data")
    }

    pub fn view_mut(&mut self, index: usize) -> ArrayViewMut2<'_, f64> {
        let e = self.entries[index].clone();
        ArrayViewMut2::from_shape(
            (e.rows, e.cols),
            &mut self.data[e.offset..e.offset + e.rows * e.cols],
        )
        .expect("layout entry consistent with data")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// MLP with explicit input and output dimensions. The parameter vector is the
/// single source of truth; forward passes view into it without copying.
#[derive(Debug, Clone)]
pub struct MlpNet {
    pub spec: MlpSpec,
    pub input_dim: usize,
    pub output_dim: usize,
    pub params: ParamVector,
}

/// Per-entry tape leaves of one recorded forward pass, aligned with
/// `params.entries()`.
pub struct ParamVars<'t> {
    pub vars: Vec<Var<'t>>,
}

impl MlpNet {
    /// Builds the layout and initializes weights with fan-in scaled uniform
    /// draws (zero biases, unit layer-norm gain).
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        spec: MlpSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if input_dim == 0 || output_dim == 0 {
            return Err(CoreError::Config("zero network width".into()));
        }
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize, offset: &mut usize| {
            entries.push(ParamEntry { name, rows, cols, offset: *offset });
            *offset += rows * cols;
        };

        let mut fan_in = input_dim;
        for (i, &width) in spec.layer_widths.iter().enumerate() {
            push(format!("w{i}"), fan_in, width, &mut offset);
            push(format!("b{i}"), 1, width, &mut offset);
            if i == 0 && spec.layer_norm_first {
                push("ln_gain".into(), 1, width, &mut offset);
                push("ln_offset".into(), 1, width, &mut offset);
            }
            fan_in = width;
        }
        push("w_out".into(), fan_in, output_dim, &mut offset);
        push("b_out".into(), 1, output_dim, &mut offset);

        let mut params = ParamVector::new(entries);
        for i in 0..params.entries.len() {
            let e = params.entries[i].clone();
            if e.name.starts_with('w') {
                let bound = (3.0 / e.rows as f64).sqrt();
                params
                    .view_mut(i)
                    .mapv_inplace(|_| rng.random_range(-bound..bound));
            } else if e.name == "ln_gain" {
                params.view_mut(i).fill(1.0);
            }
            // biases and ln_offset stay zero
        }
        Ok(MlpNet { spec, input_dim, output_dim, params })
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(CoreError::Shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    /// Plain forward pass, no gradient bookkeeping.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let p = &self.params;
        let mut h = x.clone();
        let mut idx = 0;
        for i in 0..self.spec.layer_widths.len() {
            let w = p.view(idx);
            let b = p.view(idx + 1);
            idx += 2;
            let mut pre = h.dot(&w) + &b.row(0);
            if i == 0 && self.spec.layer_norm_first {
                let gain = p.view(idx);
                let off = p.view(idx + 1);
                idx += 2;
                pre = layer_norm(&pre, &gain.row(0).to_owned(), &off.row(0).to_owned());
                h = if self.spec.tanh_after_norm { pre.mapv(f64::tanh) } else { elu(&pre) };
            } else {
                h = elu(&pre);
            }
        }
        let w = p.view(idx);
        let b = p.view(idx + 1);
        Ok(h.dot(&w) + &b.row(0))
    }

    /// Records the forward pass on `tape`, returning the output node and the
    /// parameter leaves (aligned with `params.entries()`).
    pub fn forward_on<'t>(
        &self,
        tape: &'t Tape,
        x: &Array2<f64>,
    ) -> Result<(Var<'t>, ParamVars<'t>)> {
        self.check_input(x)?;
        let leaves: Vec<Var<'t>> = (0..self.params.entries.len())
            .map(|i| tape.leaf(self.params.view(i).to_owned()))
            .collect();
        let x = tape.leaf(x.clone());
        let out = self.forward_from(x, &leaves);
        Ok((out, ParamVars { vars: leaves }))
    }

    /// Forward pass from an arbitrary input node (used when gradients must
    /// flow through the input, e.g. reparameterized actions fed to a critic).
    pub fn forward_from<'t>(&self, x: Var<'t>, leaves: &[Var<'t>]) -> Var<'t> {
        let mut h = x;
        let mut idx = 0;
        for i in 0..self.spec.layer_widths.len() {
            let pre = h.matmul(leaves[idx]).add_row(leaves[idx + 1]);
            idx += 2;
            if i == 0 && self.spec.layer_norm_first {
                let normed = layer_norm_on(pre, leaves[idx], leaves[idx + 1]);
                idx += 2;
                h = if self.spec.tanh_after_norm { normed.tanh() } else { normed.elu() };
            } else {
                h = pre.elu();
            }
        }
        h.matmul(leaves[idx]).add_row(leaves[idx + 1])
    }

    /// Leaf set for [`forward_from`] callers that record several passes over
    /// the same parameters.
    pub fn param_leaves<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            vars: (0..self.params.entries.len())
                .map(|i| tape.leaf(self.params.view(i).to_owned()))
                .collect(),
        }
    }

    /// Flattens per-entry gradients into a vector aligned with `params.data`.
    pub fn flat_grad(&self, grads: &super::tape::Gradients, leaves: &ParamVars<'_>) -> Vec<f64> {
        let mut flat = vec![0.0; self.params.len()];
        for (i, e) in self.params.entries.iter().enumerate() {
            let g = grads.wrt(leaves.vars[i]);
            flat[e.offset..e.offset + e.rows * e.cols]
                .copy_from_slice(g.as_standard_layout().as_slice().expect("standard layout"));
        }
        flat
    }
}

fn elu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { v.exp() - 1.0 })
}

/// Row-wise normalization with learned gain and offset.
fn layer_norm(x: &Array2<f64>, gain: &ndarray::Array1<f64>, offset: &ndarray::Array1<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
    let denom = var.mapv(|v| (v + LN_EPS).sqrt());
    (centered / &denom) * gain + offset
}

/// Same normalization recorded on the tape; composed from primitive ops so
/// the backward pass needs no dedicated derivation.
fn layer_norm_on<'t>(x: Var<'t>, gain: Var<'t>, offset: Var<'t>) -> Var<'t> {
    let d = x.dim().1 as f64;
    let mean = x.sum_rows().scale(1.0 / d);
    let centered = x.sub_col(mean);
    let var = centered.square().sum_rows().scale(1.0 / d);
    let denom = var.add_scalar(LN_EPS).sqrt();
    centered.div_col(denom).mul_row(gain).add_row(offset)
}
