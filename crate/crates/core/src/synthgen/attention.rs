use ndarray::Array2;

use super::{Covariates, SynthError};
use crate::netgraph::{EdgeIndex, GraphError, Network};

/// Row-stochastic weights over each node's neighborhood.
///
/// Row `i` has exactly one strictly positive weight per neighbor in `N(i)`
/// and the weights sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    index: EdgeIndex,
    weights: Vec<f64>,
}

pub const ROW_SUM_TOL: f64 = 1e-12;

impl AttentionMap {
    /// Wraps per-entry weights laid out in `EdgeIndex::neighbors(net)` order.
    pub fn from_weights(net: &Network, weights: Vec<f64>) -> Result<Self, SynthError> {
        let index = EdgeIndex::neighbors(net);
        if weights.len() != index.n_entries() {
            return Err(SynthError::Dimension(format!(
                "{} attention weights for {} directed edges",
                weights.len(),
                index.n_entries()
            )));
        }
        let map = Self { index, weights };
        map.validate()?;
        Ok(map)
    }

    /// Equal weight `1/|N(i)|` on every neighbor.
    pub fn uniform(net: &Network) -> Result<Self, SynthError> {
        net.require_no_isolated()?;
        let index = EdgeIndex::neighbors(net);
        let mut weights = vec![0.0; index.n_entries()];
        for i in 0..index.n_rows() {
            let range = index.row(i);
            let w = 1.0 / range.len() as f64;
            for e in range {
                weights[e] = w;
            }
        }
        Ok(Self { index, weights })
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for i in 0..self.index.n_rows() {
            let range = self.index.row(i);
            if range.is_empty() {
                return Err(SynthError::Graph(GraphError::IsolatedNode { node: i }));
            }
            let mut sum = 0.0;
            for e in range {
                let w = self.weights[e];
                if !(w > 0.0) || !w.is_finite() {
                    return Err(SynthError::Attention {
                        row: i,
                        detail: format!("weight {w} toward node {} is not positive", self.index.col[e]),
                    });
                }
                sum += w;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(SynthError::Attention {
                    row: i,
                    detail: format!("weights sum to {sum}"),
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.index.n_rows()
    }

    pub fn index(&self) -> &EdgeIndex {
        &self.index
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(neighbor, weight)` pairs of row `i`, by ascending neighbor id.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.index.row(i).map(move |e| (self.index.col[e], self.weights[e]))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).map(|(_, w)| w).sum()
    }

    /// `z_i = Σ_j a_ij v_j`, clamped into `[0, 1]` against rounding.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                self.row(i)
                    .map(|(j, w)| w * values[j])
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
            .collect()
    }

    /// Attention-weighted neighbor average of feature rows, `x̄_i = Σ_j a_ij x_j`.
    pub fn mix(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n(), x.ncols()));
        for i in 0..self.n() {
            let mut row = out.row_mut(i);
            for (j, w) in self.row(i) {
                row.scaled_add(w, &x.row(j));
            }
        }
        out
    }

    /// Relabels nodes: node `i` becomes `perm[i]` in `net_perm`.
    pub fn relabel(&self, perm: &[usize], net_perm: &Network) -> Result<Self, SynthError> {
        let index = EdgeIndex::neighbors(net_perm);
        let mut weights = vec![0.0; index.n_entries()];
        for i in 0..self.n() {
            let pi = perm[i];
            for (j, w) in self.row(i) {
                let pj = perm[j];
                let range = index.row(pi);
                let at = index.col[range.clone()]
                    .binary_search(&pj)
                    .map_err(|_| SynthError::Dimension("relabeled graph lacks an edge".into()))?;
                weights[range.start + at] = w;
            }
        }
        Self::from_weights(net_perm, weights)
    }
}

/// Cosine-similarity softmax over each neighborhood:
/// `a_ij = exp(cos(x_i, x_j)) / Σ_{k ∈ N(i)} exp(cos(x_i, x_k))`.
pub fn ground_truth_attention(x: &Covariates, net: &Network) -> Result<AttentionMap, SynthError> {
    if x.n() != net.n() {
        return Err(SynthError::Dimension(format!(
            "{} covariate rows for {} nodes",
            x.n(),
            net.n()
        )));
    }
    net.require_no_isolated()?;
    let m = x.matrix();
    let norms: Vec<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&v| v == 0.0) {
        return Err(SynthError::ZeroNormRow { row });
    }
    let index = EdgeIndex::neighbors(net);
    let mut weights = vec![0.0; index.n_entries()];
    for i in 0..net.n() {
        let range = index.row(i);
        let xi = m.row(i);
        let cos: Vec<f64> = range
            .clone()
            .map(|e| {
                let j = index.col[e];
                xi.dot(&m.row(j)) / (norms[i] * norms[j])
            })
            .collect();
        let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = cos.iter().map(|c| (c - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (e, v) in range.zip(exps) {
            weights[e] = v / total;
        }
    }
    let map = AttentionMap { index, weights };
    map.validate()?;
    Ok(map)
}

/// Peer exposure `z_i = Σ_{j ∈ N(i)} a_ij t_j`.
pub fn compute_exposure(attention: &AttentionMap, t: &[u8]) -> Result<Vec<f64>, SynthError> {
    if t.len() != attention.n() {
        return Err(SynthError::Dimension(format!(
            "{} treatments for {} nodes",
            t.len(),
            attention.n()
        )));
    }
    let tf: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
    Ok(attention.apply(&tf))
}
