//! Density-ratio sample weights.
//!
//! A discriminator π separates observed triples `(r_i, t_i, ẑ_i)` (label 1)
//! from a calibration set in which `t` and `ẑ` are independently permuted
//! (label 0). Since the two sets have equal size,
//! `p(r)p(t)p(z) / p(r, t, z) = (1 − π) / π`.

use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{adam_step, grad, AdamConfig, AdamState, DiffError, Matrix, ParamId, ParamSet, Tape, Var};
use crate::rng;

#[derive(Debug, Error)]
pub enum ReweightError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid setting: {0}")]
    Config(String),
    #[error("discriminator loss became non-finite at step {step}")]
    Diverged { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiOptimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiConfig {
    pub hidden_widths: Vec<usize>,
    pub clip_eps: f64,
    pub normalize: bool,
    pub optimizer: PiOptimizer,
}

impl Default for PiConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 64, 64],
            clip_eps: 0.01,
            normalize: true,
            optimizer: PiOptimizer::Adam,
        }
    }
}

impl PiConfig {
    pub fn validate(&self) -> Result<(), ReweightError> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(ReweightError::Config(format!("clip_eps {} outside (0, 0.5)", self.clip_eps)));
        }
        if self.hidden_widths.contains(&0) {
            return Err(ReweightError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// The discriminator: an MLP with ReLU hidden layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct PiNet {
    pub in_dim: usize,
    pub params: ParamSet,
    layers: Vec<(ParamId, ParamId)>,
}

impl PiNet {
    pub fn new(in_dim: usize, hidden_widths: &[usize], seed: u64) -> Self {
        let mut r = rng::stream(seed, "pi_init");
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut width = in_dim;
        for (k, &out) in hidden_widths.iter().chain(std::iter::once(&1)).enumerate() {
            let w = params.add_glorot(format!("pi.{k}.weight"), width, out, &mut r);
            let b = params.add_zeros(format!("pi.{k}.bias"), 1, out);
            layers.push((w, b));
            width = out;
        }
        Self {
            in_dim,
            params,
            layers,
        }
    }

    pub fn with_params(mut self, params: ParamSet) -> Result<Self, ReweightError> {
        if !self.params.same_layout(&params) {
            return Err(ReweightError::Dimension("discriminator parameter layout differs".into()));
        }
        self.params = params;
        Ok(self)
    }

    /// Records `π(input)` as an m×1 column.
    pub fn forward_tape(&self, tape: &mut Tape, params: &ParamSet, input: Var) -> Result<Var, DiffError> {
        let mut a = input;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(params, w), tape.param(params, b));
            a = tape.affine(a, w, b)?;
            a = if k + 1 < self.layers.len() {
                tape.relu(a)?
            } else {
                tape.sigmoid(a)?
            };
        }
        Ok(a)
    }

    pub fn probabilities(&self, features: &Matrix) -> Result<Vec<f64>, ReweightError> {
        self.check(features)?;
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let p = self.forward_tape(&mut tape, &self.params, x)?;
        Ok(tape.value(p).column(0).to_vec())
    }

    fn check(&self, features: &Matrix) -> Result<(), ReweightError> {
        if features.ncols() != self.in_dim {
            return Err(ReweightError::Dimension(format!(
                "discriminator expects {} inputs, got {}",
                self.in_dim,
                features.ncols()
            )));
        }
        Ok(())
    }
}

/// Discriminator inputs `r_i ⊕ t_i ⊕ z_i`.
pub fn pi_features(r: &Matrix, t: &[f64], z: &[f64]) -> Result<Matrix, ReweightError> {
    if t.len() != r.nrows() || z.len() != r.nrows() {
        return Err(ReweightError::Dimension(format!(
            "{} representation rows, {} treatments, {} exposures",
            r.nrows(),
            t.len(),
            z.len()
        )));
    }
    let t = Array2::from_shape_vec((t.len(), 1), t.to_vec()).expect("column");
    let z = Array2::from_shape_vec((z.len(), 1), z.to_vec()).expect("column");
    Ok(concatenate![Axis(1), *r, t, z])
}

/// Independent uniform permutations of `t` and `z`.
pub fn make_calibration(t: &[f64], z: &[f64], seed: u64) -> Result<(Vec<f64>, Vec<f64>), ReweightError> {
    if t.len() != z.len() {
        return Err(ReweightError::Dimension(format!("{} treatments, {} exposures", t.len(), z.len())));
    }
    let mut tp = t.to_vec();
    let mut zp = z.to_vec();
    tp.shuffle(&mut rng::stream(seed, "calibration_t"));
    zp.shuffle(&mut rng::stream(seed, "calibration_z"));
    Ok((tp, zp))
}

/// Mean BCE of π over observed rows (label 1) stacked on calibration rows (label 0).
pub fn pi_loss_tape(
    tape: &mut Tape,
    params: &ParamSet,
    pi: &PiNet,
    stacked: &Matrix,
    labels: &Arc<Vec<f64>>,
) -> Result<Var, DiffError> {
    let x = tape.constant(stacked.clone());
    let p = pi.forward_tape(tape, params, x)?;
    tape.bce(p, Arc::clone(labels))
}

/// Stacks observed and calibration inputs and builds their labels.
pub fn stack_for_pi(obs: &Matrix, cal: &Matrix) -> Result<(Matrix, Arc<Vec<f64>>), ReweightError> {
    if obs.dim() != cal.dim() {
        return Err(ReweightError::Dimension(format!(
            "observed {:?} and calibration {:?} differ",
            obs.dim(),
            cal.dim()
        )));
    }
    let stacked = concatenate![Axis(0), *obs, *cal];
    let mut labels = vec![1.0; obs.nrows()];
    labels.resize(2 * obs.nrows(), 0.0);
    Ok((stacked, Arc::new(labels)))
}

/// Discriminator with its optimizer state, kept across outer iterations.
#[derive(Debug, Clone)]
pub struct PiTrainer {
    pub net: PiNet,
    pub adam: AdamState,
    pub lr: f64,
    pub optimizer: PiOptimizer,
}

impl PiTrainer {
    pub fn new(net: PiNet, lr: f64, optimizer: PiOptimizer) -> Self {
        let adam = AdamState::new(&net.params);
        Self {
            net,
            adam,
            lr,
            optimizer,
        }
    }

    /// Runs `epochs` full-batch steps on the stacked BCE; returns the loss
    /// before each step.
    pub fn train(&mut self, obs: &Matrix, cal: &Matrix, epochs: usize) -> Result<Vec<f64>, ReweightError> {
        self.net.check(obs)?;
        let (stacked, labels) = stack_for_pi(obs, cal)?;
        let mut losses = Vec::with_capacity(epochs);
        let cfg = AdamConfig::with_lr(self.lr);
        for step in 0..epochs {
            let net = &self.net;
            let (loss, g) = grad(&net.params, |tape, p| pi_loss_tape(tape, p, net, &stacked, &labels))
                .map_err(|e| match e {
                    DiffError::NonFinite { .. } => ReweightError::Diverged { step },
                    other => other.into(),
                })?;
            if !loss.is_finite() {
                return Err(ReweightError::Diverged { step });
            }
            losses.push(loss);
            match self.optimizer {
                PiOptimizer::Adam => adam_step(&mut self.net.params, &g, &mut self.adam, &cfg)?,
                PiOptimizer::Sgd => {
                    for (p, gb) in self.net.params.iter_mut().zip(&g.blocks) {
                        p.value.scaled_add(-self.lr, gb);
                    }
                }
            }
        }
        Ok(losses)
    }
}

/// Trains a fresh discriminator with full-batch Adam.
pub fn train_pi(
    obs: &Matrix,
    cal: &Matrix,
    hidden_widths: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PiNet, ReweightError> {
    let mut trainer = PiTrainer::new(PiNet::new(obs.ncols(), hidden_widths, seed), lr, PiOptimizer::Adam);
    trainer.train(obs, cal, epochs)?;
    Ok(trainer.net)
}

/// Per-unit weights `(1 − π_i) / π_i` with `π_i` clipped to `[ε, 1 − ε]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub normalized: bool,
}

impl WeightVector {
    pub fn ones(n: usize) -> Self {
        Self {
            w: vec![1.0; n],
            normalized: true,
        }
    }

    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len().max(1) as f64
    }

    pub fn max(&self) -> f64 {
        self.w.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.w.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn sample_weights(probs: &[f64], clip_eps: f64, normalize: bool) -> Result<WeightVector, ReweightError> {
    if !(clip_eps > 0.0 && clip_eps < 0.5) {
        return Err(ReweightError::Config(format!("clip_eps {clip_eps} outside (0, 0.5)")));
    }
    if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
        return Err(ReweightError::Config(format!("probability {i} is not finite")));
    }
    let mut w: Vec<f64> = probs
        .iter()
        .map(|&p| {
            let p = p.clamp(clip_eps, 1.0 - clip_eps);
            (1.0 - p) / p
        })
        .collect();
    if normalize && !w.is_empty() {
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        for v in &mut w {
            *v /= mean;
        }
    }
    Ok(WeightVector { w, normalized: normalize })
}

/// Weighted Pearson correlation; `None` when either input has zero weighted variance.
pub fn weighted_pearson(a: &[f64], b: &[f64], w: &[f64]) -> Option<f64> {
    let total: f64 = w.iter().sum();
    if total <= 0.0 || a.len() != b.len() || a.len() != w.len() {
        return None;
    }
    let ma = a.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / total;
    let mb = b.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / total;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for ((x, y), w) in a.iter().zip(b).zip(w) {
        let (dx, dy) = (x - ma, y - mb);
        cov += w * dx * dy;
        va += w * dx * dx;
        vb += w * dy * dy;
    }
    let scale = va.max(vb).max(f64::MIN_POSITIVE);
    if va <= 1e-24 * scale.max(1.0) || vb <= 1e-24 * scale.max(1.0) {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecorrelationReport {
    pub corr_tz: Option<f64>,
    /// `max_k |corr_w(R_k, t)|` over non-constant representation columns.
    pub max_abs_corr_rt: Option<f64>,
    pub max_abs_corr_rz: Option<f64>,
    /// Representation columns skipped for zero weighted variance.
    pub constant_columns: usize,
    pub flags: Vec<String>,
}

pub fn decorrelation_report(r: &Matrix, t: &[f64], z: &[f64], w: &[f64]) -> DecorrelationReport {
    let mut flags = Vec::new();
    let corr_tz = weighted_pearson(t, z, w);
    if corr_tz.is_none() {
        flags.push("corr(t, z) undefined: t or z has zero variance".to_string());
    }
    let mut max_rt: Option<f64> = None;
    let mut max_rz: Option<f64> = None;
    let mut constant_columns = 0;
    for col in r.columns() {
        let col = col.to_vec();
        match (weighted_pearson(&col, t, w), weighted_pearson(&col, z, w)) {
            (None, None) => constant_columns += 1,
            (rt, rz) => {
                if let Some(v) = rt {
                    max_rt = Some(max_rt.map_or(v.abs(), |m: f64| m.max(v.abs())));
                }
                if let Some(v) = rz {
                    max_rz = Some(max_rz.map_or(v.abs(), |m: f64| m.max(v.abs())));
                }
            }
        }
    }
    if constant_columns > 0 {
        flags.push(format!("{constant_columns} representation columns have zero variance"));
    }
    DecorrelationReport {
        corr_tz,
        max_abs_corr_rt: max_rt,
        max_abs_corr_rz: max_rz,
        constant_columns,
        flags,
    }
}
