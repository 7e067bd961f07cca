//! Semi-synthetic benchmark generation.
//!
//! The pipeline is: node features (from a file or a spectral embedding) →
//! cosine-softmax ground-truth attention over each neighborhood → Gibbs
//! sampled treatments → attention-weighted peer exposure → outcomes from a
//! linear potential-outcome model. The same model is kept as an [`Oracle`]
//! so every direct, spillover and total effect target is exact.

mod attention;
mod bundle;
mod embed;
mod gibbs;
pub mod graphs;
mod oracle;

use ndarray::Array2;
use thiserror::Error;

pub use attention::{compute_exposure, ground_truth_attention, AttentionMap};
pub use bundle::{
    bundle_hash, generate_benchmark, load_bundle, load_features, write_bundle, Bundle,
    BundleSummary, FeatureSource, GeneratorConfig, GraphSource, BUNDLE_FILES,
};
pub use embed::spectral_embed;
pub use gibbs::{gibbs_sample_treatments, GibbsSampler};
pub use oracle::{draw_params, generate_outcomes, NodeEffects, Oracle, OracleParams, ParamSpec};

use crate::netgraph::{GraphError, Network};
use crate::tsv::TableError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("covariate row {row} has zero norm")]
    ZeroNormRow { row: usize },
    #[error("covariate entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("embedding dimension {d} must satisfy 1 <= d < n = {n}")]
    BadDimension { d: usize, n: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("attention row {row}: {detail}")]
    Attention { row: usize, detail: String },
    #[error("{path}: {detail}")]
    Bundle { path: std::path::PathBuf, detail: String },
}

/// Node covariates: an n × d matrix with finite entries and no zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates(Array2<f64>);

impl Covariates {
    pub fn new(x: Array2<f64>) -> Result<Self, SynthError> {
        for ((row, col), v) in x.indexed_iter() {
            if !v.is_finite() {
                return Err(SynthError::NonFinite { row, col });
            }
        }
        if let Some(row) = x.rows().into_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(SynthError::ZeroNormRow { row });
        }
        Ok(Self(x))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Observed networked data together with the generator's true exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub net: Network,
    pub x: Covariates,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
    pub z_true: Vec<f64>,
}

impl Dataset {
    pub fn new(
        net: Network,
        x: Covariates,
        t: Vec<u8>,
        y: Vec<f64>,
        z_true: Vec<f64>,
    ) -> Result<Self, SynthError> {
        let n = net.n();
        if x.n() != n || t.len() != n || y.len() != n || z_true.len() != n {
            return Err(SynthError::Dimension(format!(
                "graph has {n} nodes; x has {} rows, t {}, y {}, z {}",
                x.n(),
                t.len(),
                y.len(),
                z_true.len()
            )));
        }
        if let Some(i) = t.iter().position(|&v| v > 1) {
            return Err(SynthError::Param(format!("treatment of node {i} is {}", t[i])));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(SynthError::Param(format!("outcome of node {i} is not finite")));
        }
        if let Some(i) = z_true.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(SynthError::Param(format!("exposure of node {i} outside [0, 1]")));
        }
        Ok(Self { net, x, t, y, z_true })
    }

    pub fn n(&self) -> usize {
        self.net.n()
    }

    pub fn t_f64(&self) -> Vec<f64> {
        self.t.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.t.iter().map(|&v| f64::from(v)).sum::<f64>() / self.n().max(1) as f64
    }

    /// Fraction of treated neighbors (homogeneous exposure).
    pub fn neighbor_fraction(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                let nb = self.net.neighbors(i);
                if nb.is_empty() {
                    0.0
                } else {
                    nb.iter().map(|&j| f64::from(self.t[j])).sum::<f64>() / nb.len() as f64
                }
            })
            .collect()
    }
}
