//! The DWR outcome network.
//!
//! An MLP encoder maps covariates to hidden states `h`. Dot products
//! `h_i·h_j` score every edge; a softmax over `N(i)` gives the attention map
//! used for the estimated exposure `ẑ_i = Σ_j a_ij t_j`, and a second softmax
//! over `N(i) ∪ {i}` aggregates hidden states into `r_i`. Two heads
//! (control, treated) regress the outcome on `r_i ⊕ z`.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Matrix, ParamId, ParamSet, Tape, Var};
use crate::netgraph::{EdgeIndex, Network};
use crate::rng::{self, Rng};
use crate::synthgen::{AttentionMap, Covariates, NodeEffects, SynthError};

/// Slack allowed when checking that an exposure lies in `[0, 1]`.
pub const EXPOSURE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("exposure {value} of node {node} outside [0, 1]")]
    ExposureRange { node: usize, value: f64 },
    #[error("parameters do not match the model architecture: {0}")]
    Architecture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    /// Learned attention; when off both maps are uniform.
    pub use_attention: bool,
    /// Density-ratio sample weights in the outcome loss.
    pub use_weights: bool,
    /// Dropout rate on hidden head activations during training.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![32, 64],
            head_widths: vec![128, 128, 128],
            use_attention: true,
            use_weights: true,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Ablation label: `dwr`, `w/o w`, `w/o att` or `w/o att & w`.
    pub fn mode(&self) -> &'static str {
        match (self.use_attention, self.use_weights) {
            (true, true) => "dwr",
            (true, false) => "w/o w",
            (false, true) => "w/o att",
            (false, false) => "w/o att & w",
        }
    }

    pub fn representation_dim(&self) -> usize {
        *self.encoder_widths.last().expect("encoder has layers")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.encoder_widths.is_empty() || self.head_widths.is_empty() {
            return Err(ModelError::Architecture("encoder and heads need at least one layer".into()));
        }
        if self.encoder_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return Err(ModelError::Architecture("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Architecture(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Graph-side inputs shared by every forward pass on one dataset.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub x: Matrix,
    pub t: Vec<f64>,
    pub neighbors: Arc<EdgeIndex>,
    pub with_self: Arc<EdgeIndex>,
    uniform_neighbors: Matrix,
    uniform_with_self: Matrix,
}

fn uniform_weights(index: &EdgeIndex) -> Matrix {
    let mut w = Array2::zeros((index.n_entries(), 1));
    for i in 0..index.n_rows() {
        let range = index.row(i);
        let v = 1.0 / range.len() as f64;
        for e in range {
            w[[e, 0]] = v;
        }
    }
    w
}

impl GraphInputs {
    pub fn new(net: &Network, x: &Covariates, t: &[u8]) -> Result<Self, ModelError> {
        net.require_no_isolated().map_err(SynthError::from)?;
        if x.n() != net.n() || t.len() != net.n() {
            return Err(ModelError::Dimension(format!(
                "graph has {} nodes, covariates {} rows, treatments {}",
                net.n(),
                x.n(),
                t.len()
            )));
        }
        let neighbors = Arc::new(EdgeIndex::neighbors(net));
        let with_self = Arc::new(EdgeIndex::with_self(net));
        Ok(Self {
            x: x.matrix().clone(),
            t: t.iter().map(|&v| f64::from(v)).collect(),
            uniform_neighbors: uniform_weights(&neighbors),
            uniform_with_self: uniform_weights(&with_self),
            neighbors,
            with_self,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub h: Var,
    /// Neighbor-only attention weights, one per `neighbors` entry.
    pub attention: Var,
    /// Attention over `N(i) ∪ {i}`, one per `with_self` entry.
    pub self_attention: Var,
    pub z_hat: Var,
    pub r: Var,
    pub y0: Var,
    pub y1: Var,
    pub y_hat: Var,
}

/// Plain values of a forward pass in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub h: Matrix,
    pub attention: AttentionMap,
    pub self_weights: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub r: Matrix,
    pub y_hat: Vec<f64>,
}

type Layer = (ParamId, ParamId);

#[derive(Debug, Clone, PartialEq)]
pub struct DwrModel {
    pub config: ModelConfig,
    pub in_dim: usize,
    pub params: ParamSet,
    encoder: Vec<Layer>,
    heads: [Vec<Layer>; 2],
}

fn add_layer(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, r: &mut Rng) -> Layer {
    let w = params.add_glorot(format!("{name}.weight"), fan_in, fan_out, r);
    let b = params.add_zeros(format!("{name}.bias"), 1, fan_out);
    (w, b)
}

impl DwrModel {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, in_dim: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if in_dim == 0 {
            return Err(ModelError::Architecture("input dimension must be positive".into()));
        }
        let mut r = rng::stream(seed, "dwr_init");
        let mut params = ParamSet::new();
        let mut encoder = Vec::new();
        let mut width = in_dim;
        for (k, &out) in config.encoder_widths.iter().enumerate() {
            encoder.push(add_layer(&mut params, &format!("encoder.{k}"), width, out, &mut r));
            width = out;
        }
        let head_in = width + 1;
        let mut heads: [Vec<Layer>; 2] = [Vec::new(), Vec::new()];
        for (arm, layers) in heads.iter_mut().enumerate() {
            let mut width = head_in;
            for (k, &out) in config.head_widths.iter().chain(std::iter::once(&1)).enumerate() {
                layers.push(add_layer(&mut params, &format!("head{arm}.{k}"), width, out, &mut r));
                width = out;
            }
        }
        Ok(Self {
            config,
            in_dim,
            params,
            encoder,
            heads,
        })
    }

    /// Replaces the parameters with `params`, which must have this model's layout.
    pub fn with_params(mut self, params: ParamSet) -> Result<Self, ModelError> {
        if !self.params.same_layout(&params) {
            return Err(ModelError::Architecture("block names or shapes differ".into()));
        }
        self.params = params;
        Ok(self)
    }

    /// Sets every head parameter to zero.
    pub fn zero_heads(&mut self) {
        for layer in self.heads.iter().flatten() {
            self.params.get_mut(layer.0).fill(0.0);
            self.params.get_mut(layer.1).fill(0.0);
        }
    }

    fn check_inputs(&self, inputs: &GraphInputs) -> Result<(), ModelError> {
        if inputs.dim() != self.in_dim {
            return Err(ModelError::Dimension(format!(
                "model expects {} covariates, data has {}",
                self.in_dim,
                inputs.dim()
            )));
        }
        Ok(())
    }

    pub fn encode_tape(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for &(w, b) in &self.encoder {
            let (w, b) = (tape.param(params, w), tape.param(params, b));
            let a = tape.affine(h, w, b)?;
            h = tape.relu(a)?;
        }
        Ok(h)
    }

    /// Head `arm` applied to `r ⊕ z`.
    pub fn head_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        arm: usize,
        r: Var,
        z: Var,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var, DiffError> {
        let layers = &self.heads[arm];
        let mut a = tape.concat_cols(r, z)?;
        for (k, &(w, b)) in layers.iter().enumerate() {
            let (w, b) = (tape.param(params, w), tape.param(params, b));
            a = tape.affine(a, w, b)?;
            if k + 1 < layers.len() {
                a = tape.relu(a)?;
                if let Some(r) = dropout.as_deref_mut() {
                    a = tape.dropout(a, self.config.dropout, r)?;
                }
            }
        }
        Ok(a)
    }

    /// Records the full forward pass. `dropout` enables training-mode dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        inputs: &GraphInputs,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Forward, ModelError> {
        self.check_inputs(inputs)?;
        let x = tape.constant(inputs.x.clone());
        let h = self.encode_tape(tape, params, x)?;
        let (attention, self_attention) = if self.config.use_attention {
            let s = tape.edge_dot(h, &inputs.neighbors)?;
            let a = tape.segment_softmax(s, &inputs.neighbors)?;
            let s_self = tape.edge_dot(h, &inputs.with_self)?;
            let a_self = tape.segment_softmax(s_self, &inputs.with_self)?;
            (a, a_self)
        } else {
            (
                tape.constant(inputs.uniform_neighbors.clone()),
                tape.constant(inputs.uniform_with_self.clone()),
            )
        };
        let t = tape.column(&inputs.t);
        let z_hat = tape.spmm(attention, t, &inputs.neighbors)?;
        let mixed = tape.spmm(self_attention, h, &inputs.with_self)?;
        let r = tape.relu(mixed)?;
        let y0 = self.head_tape(tape, params, 0, r, z_hat, dropout.as_deref_mut())?;
        let y1 = self.head_tape(tape, params, 1, r, z_hat, dropout.as_deref_mut())?;
        let control: Vec<f64> = inputs.t.iter().map(|v| 1.0 - v).collect();
        let t_mask = tape.column(&inputs.t);
        let c_mask = tape.column(&control);
        let treated = tape.mul(y1, t_mask)?;
        let untreated = tape.mul(y0, c_mask)?;
        let y_hat = tape.add(treated, untreated)?;
        Ok(Forward {
            h,
            attention,
            self_attention,
            z_hat,
            r,
            y0,
            y1,
            y_hat,
        })
    }

    /// Evaluation-mode forward pass.
    pub fn evaluate(&self, net: &Network, inputs: &GraphInputs) -> Result<Evaluation, ModelError> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &self.params, inputs, None)?;
        let column = |v: Var| tape.value(v).column(0).to_vec();
        let attention = AttentionMap::from_weights(net, column(f.attention))?;
        Ok(Evaluation {
            h: tape.value(f.h).clone(),
            self_weights: column(f.self_attention),
            z_hat: column(f.z_hat).into_iter().map(|z| z.clamp(0.0, 1.0)).collect(),
            r: tape.value(f.r).clone(),
            y_hat: column(f.y_hat),
            attention,
        })
    }

    /// Head `arm` evaluated on representations `r` at exposures `z`.
    pub fn head_values(&self, arm: usize, r: &Matrix, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        if z.len() != r.nrows() {
            return Err(ModelError::Dimension(format!("{} exposures for {} rows", z.len(), r.nrows())));
        }
        if let Some(node) = z.iter().position(|v| !(-EXPOSURE_TOL..=1.0 + EXPOSURE_TOL).contains(v)) {
            return Err(ModelError::ExposureRange { node, value: z[node] });
        }
        let mut tape = Tape::new();
        let rv = tape.constant(r.clone());
        let zv = tape.column(z);
        let out = self.head_tape(&mut tape, &self.params, arm, rv, zv, None)?;
        Ok(tape.value(out).column(0).to_vec())
    }

    /// `ŷ_i = head_{t_i}(r_i ⊕ z_i)`.
    pub fn predict(&self, r: &Matrix, t: &[u8], z: &[f64]) -> Result<Vec<f64>, ModelError> {
        if t.len() != r.nrows() {
            return Err(ModelError::Dimension(format!("{} treatments for {} rows", t.len(), r.nrows())));
        }
        let y0 = self.head_values(0, r, z)?;
        let y1 = self.head_values(1, r, z)?;
        Ok(t.iter()
            .enumerate()
            .map(|(i, &ti)| if ti == 1 { y1[i] } else { y0[i] })
            .collect())
    }

    /// Per node, `[ŷ(0,0), ŷ(0,z_i), ŷ(0,1), ŷ(1,0), ŷ(1,z_i), ŷ(1,1)]`.
    pub fn counterfactual_grid(&self, r: &Matrix, z: &[f64]) -> Result<Vec<[f64; 6]>, ModelError> {
        let n = r.nrows();
        let zeros = vec![0.0; n];
        let ones = vec![1.0; n];
        let mut cols = Vec::with_capacity(6);
        for arm in 0..2 {
            for zz in [&zeros, &z.to_vec(), &ones] {
                cols.push(self.head_values(arm, r, zz)?);
            }
        }
        Ok((0..n)
            .map(|i| std::array::from_fn(|k| cols[k][i]))
            .collect())
    }

    /// Estimated direct, spillover and total effects at `z_eval`.
    pub fn effect_estimates(&self, r: &Matrix, z_eval: &[f64]) -> Result<NodeEffects, ModelError> {
        let n = r.nrows();
        let zeros = vec![0.0; n];
        let ones = vec![1.0; n];
        let y1_z = self.head_values(1, r, z_eval)?;
        let y0_z = self.head_values(0, r, z_eval)?;
        let y0_0 = self.head_values(0, r, &zeros)?;
        let y1_1 = self.head_values(1, r, &ones)?;
        Ok(NodeEffects {
            de: (0..n).map(|i| y1_z[i] - y0_z[i]).collect(),
            se: (0..n).map(|i| y0_z[i] - y0_0[i]).collect(),
            te: (0..n).map(|i| y1_1[i] - y0_0[i]).collect(),
        })
    }
}

/// Neighbor-only softmax of the dot products `h_i·h_j`.
pub fn attention_scores(h: &Matrix, net: &Network) -> Result<AttentionMap, ModelError> {
    net.require_no_isolated().map_err(SynthError::from)?;
    if h.nrows() != net.n() {
        return Err(ModelError::Dimension(format!("{} rows for {} nodes", h.nrows(), net.n())));
    }
    let index = Arc::new(EdgeIndex::neighbors(net));
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let s = tape.edge_dot(hv, &index)?;
    let a = tape.segment_softmax(s, &index)?;
    Ok(AttentionMap::from_weights(net, tape.value(a).column(0).to_vec())?)
}

/// `r_i = relu(Σ_{j ∈ N(i) ∪ {i}} a_ij h_j)` for weights laid out along `with_self`.
pub fn aggregate(h: &Matrix, self_weights: &[f64], with_self: &Arc<EdgeIndex>) -> Result<Matrix, ModelError> {
    if self_weights.len() != with_self.n_entries() {
        return Err(ModelError::Dimension(format!(
            "{} weights for {} entries",
            self_weights.len(),
            with_self.n_entries()
        )));
    }
    for i in 0..with_self.n_rows() {
        let sum: f64 = with_self.row(i).map(|e| self_weights[e]).sum();
        if (sum - 1.0).abs() > 1e-12 || with_self.row(i).any(|e| !(self_weights[e] >= 0.0)) {
            return Err(ModelError::Dimension(format!("aggregation row {i} is not stochastic")));
        }
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let w = tape.column(self_weights);
    let m = tape.spmm(w, hv, with_self)?;
    let r = tape.relu(m)?;
    Ok(tape.value(r).clone())
}
