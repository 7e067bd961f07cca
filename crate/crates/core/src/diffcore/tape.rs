use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::ops::{self, bce_term, check_labels, BCE_CLIP};
use super::params::{Gradients, ParamId, ParamSet};
use super::{check_finite, DiffError, Matrix};
use crate::netgraph::EdgeIndex;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    EdgeDot {
        h: Var,
        edges: Arc<EdgeIndex>,
    },
    SegmentSoftmax {
        scores: Var,
        edges: Arc<EdgeIndex>,
    },
    SpMM {
        weights: Var,
        dense: Var,
        edges: Arc<EdgeIndex>,
    },
    WeightedMse {
        pred: Var,
        target: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
        ids: Arc<Vec<usize>>,
    },
    Bce {
        prob: Var,
        labels: Arc<Vec<f64>>,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::ConcatCols(..) => "concat_cols",
            Op::EdgeDot { .. } => "edge_dot",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::SpMM { .. } => "spmm",
            Op::WeightedMse { .. } => "weighted_mse",
            Op::Bce { .. } => "bce_loss",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

fn dims(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> Result<f64, DiffError> {
        let m = self.value(v);
        if m.dim() != (1, 1) {
            return Err(shape_err("scalar", format!("node is {}", dims(m))));
        }
        Ok(m[[0, 0]])
    }

    fn push(&mut self, op: Op) -> Result<Var, DiffError> {
        let value = self.compute(&op)?;
        check_finite(op.name(), &value)?;
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => self.inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Column vector constant.
    pub fn column(&mut self, values: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column"))
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: params.get(id).clone(),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a 1×k row to every row of an n×k matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        self.push(Op::AddRow(a, row))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        self.push(Op::Scale(a, c))
    }

    /// Which ReLU outputs are active, over every ReLU on the tape.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.push(Op::ConcatCols(a, b))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1 / (1 − rate)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var, DiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = self
            .value(a)
            .mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Per-entry dot products `h_i · h_j` for every `(i, j)` in `edges`,
    /// returned as an E×1 column.
    pub fn edge_dot(&mut self, h: Var, edges: &Arc<EdgeIndex>) -> Result<Var, DiffError> {
        self.push(Op::EdgeDot {
            h,
            edges: Arc::clone(edges),
        })
    }

    /// Softmax over the entries of each row of `edges`.
    pub fn segment_softmax(&mut self, scores: Var, edges: &Arc<EdgeIndex>) -> Result<Var, DiffError> {
        self.push(Op::SegmentSoftmax {
            scores,
            edges: Arc::clone(edges),
        })
    }

    /// Sparse-dense product: `out_i = Σ_{e ∈ row i} w_e · dense[col_e]`.
    pub fn spmm(&mut self, weights: Var, dense: Var, edges: &Arc<EdgeIndex>) -> Result<Var, DiffError> {
        self.push(Op::SpMM {
            weights,
            dense,
            edges: Arc::clone(edges),
        })
    }

    /// `(1/|ids|) Σ_{i ∈ ids} w_i (pred_i − target_i)²` for an n×1 `pred`;
    /// `target` and `weights` are indexed by node.
    pub fn weighted_mse(
        &mut self,
        pred: Var,
        target: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
        ids: Arc<Vec<usize>>,
    ) -> Result<Var, DiffError> {
        if let Some(k) = weights.iter().position(|w| !(*w >= 0.0)) {
            return Err(DiffError::Domain {
                op: "weighted_mse",
                detail: format!("weight {k} is negative or NaN"),
            });
        }
        self.push(Op::WeightedMse {
            pred,
            target,
            weights,
            ids,
        })
    }

    pub fn bce(&mut self, prob: Var, labels: Arc<Vec<f64>>) -> Result<Var, DiffError> {
        check_labels(&labels)?;
        self.push(Op::Bce { prob, labels })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        self.push(Op::Sum(a))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::Sum(a) => vec![a],
            Op::EdgeDot { h, .. } => vec![h],
            Op::SegmentSoftmax { scores, .. } => vec![scores],
            Op::SpMM { weights, dense, .. } => vec![weights, dense],
            Op::WeightedMse { pred, .. } => vec![pred],
            Op::Bce { prob, .. } => vec![prob],
        }
    }

    fn compute(&self, op: &Op) -> Result<Matrix, DiffError> {
        let val = |v: Var| &self.nodes[v.0].value;
        let name = op.name();
        match op {
            Op::Constant | Op::Param(_) => unreachable!("leaves carry their own values"),
            Op::MatMul(a, b) => {
                let (a, b) = (val(*a), val(*b));
                if a.ncols() != b.nrows() {
                    return Err(shape_err(name, format!("{} · {}", dims(a), dims(b))));
                }
                Ok(a.dot(b))
            }
            Op::AddRow(a, r) => {
                let (a, r) = (val(*a), val(*r));
                if r.nrows() != 1 || r.ncols() != a.ncols() {
                    return Err(shape_err(name, format!("{} + row {}", dims(a), dims(r))));
                }
                Ok(a + r)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (val(*a), val(*b));
                if a.dim() != b.dim() {
                    return Err(shape_err(name, format!("{} vs {}", dims(a), dims(b))));
                }
                Ok(match op {
                    Op::Add(..) => a + b,
                    Op::Sub(..) => a - b,
                    _ => a * b,
                })
            }
            Op::Scale(a, c) => Ok(val(*a) * *c),
            Op::Relu(a) => Ok(ops::relu(val(*a))),
            Op::Sigmoid(a) => Ok(ops::sigmoid(val(*a))),
            Op::ConcatCols(a, b) => {
                let (a, b) = (val(*a), val(*b));
                if a.nrows() != b.nrows() {
                    return Err(shape_err(name, format!("{} | {}", dims(a), dims(b))));
                }
                Ok(concatenate![Axis(1), *a, *b])
            }
            Op::EdgeDot { h, edges } => {
                let h = val(*h);
                if h.nrows() != edges.n_rows() {
                    return Err(shape_err(
                        name,
                        format!("{} rows for {} nodes", h.nrows(), edges.n_rows()),
                    ));
                }
                let mut out = Array2::zeros((edges.n_entries(), 1));
                for i in 0..edges.n_rows() {
                    let hi = h.row(i);
                    for e in edges.row(i) {
                        out[[e, 0]] = hi.dot(&h.row(edges.col[e]));
                    }
                }
                Ok(out)
            }
            Op::SegmentSoftmax { scores, edges } => {
                let s = val(*scores);
                if s.dim() != (edges.n_entries(), 1) {
                    return Err(shape_err(
                        name,
                        format!("scores {} for {} entries", dims(s), edges.n_entries()),
                    ));
                }
                let mut out = Array2::zeros(s.raw_dim());
                for i in 0..edges.n_rows() {
                    let range = edges.row(i);
                    if range.is_empty() {
                        return Err(DiffError::EmptySupport { op: name, row: i });
                    }
                    let max = range
                        .clone()
                        .map(|e| s[[e, 0]])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for e in range.clone() {
                        let v = (s[[e, 0]] - max).exp();
                        out[[e, 0]] = v;
                        total += v;
                    }
                    for e in range {
                        out[[e, 0]] /= total;
                    }
                }
                Ok(out)
            }
            Op::SpMM {
                weights,
                dense,
                edges,
            } => {
                let (w, d) = (val(*weights), val(*dense));
                if w.dim() != (edges.n_entries(), 1) {
                    return Err(shape_err(
                        name,
                        format!("weights {} for {} entries", dims(w), edges.n_entries()),
                    ));
                }
                let max_col = edges.col.iter().copied().max().map_or(0, |c| c + 1);
                if d.nrows() < max_col {
                    return Err(shape_err(name, format!("dense {} too short", dims(d))));
                }
                let mut out = Array2::zeros((edges.n_rows(), d.ncols()));
                for i in 0..edges.n_rows() {
                    let mut row = out.row_mut(i);
                    for e in edges.row(i) {
                        row.scaled_add(w[[e, 0]], &d.row(edges.col[e]));
                    }
                }
                Ok(out)
            }
            Op::WeightedMse {
                pred,
                target,
                weights,
                ids,
            } => {
                let p = val(*pred);
                if p.ncols() != 1 || target.len() != p.nrows() || weights.len() != p.nrows() {
                    return Err(shape_err(
                        name,
                        format!(
                            "pred {} with {} targets and {} weights",
                            dims(p),
                            target.len(),
                            weights.len()
                        ),
                    ));
                }
                if ids.is_empty() {
                    return Err(DiffError::Domain {
                        op: name,
                        detail: "no rows selected".into(),
                    });
                }
                let mut sum = 0.0;
                for &i in ids.iter() {
                    let e = p[[i, 0]] - target[i];
                    sum += weights[i] * e * e;
                }
                Ok(Array2::from_elem((1, 1), sum / ids.len() as f64))
            }
            Op::Bce { prob, labels } => {
                let p = val(*prob);
                if p.ncols() != 1 || p.nrows() != labels.len() || labels.is_empty() {
                    return Err(shape_err(
                        name,
                        format!("prob {} with {} labels", dims(p), labels.len()),
                    ));
                }
                let sum: f64 = p
                    .column(0)
                    .iter()
                    .zip(labels.iter())
                    .map(|(&q, &l)| bce_term(q, l))
                    .sum();
                Ok(Array2::from_elem((1, 1), sum / labels.len() as f64))
            }
            Op::Sum(a) => Ok(Array2::from_elem((1, 1), val(*a).sum())),
        }
    }

    /// Recomputes every non-leaf value from the recorded ops.
    pub fn replay(&self) -> Result<Vec<Matrix>, DiffError> {
        let mut fresh = Tape::new();
        for node in &self.nodes {
            let value = match node.op {
                Op::Constant | Op::Param(_) => node.value.clone(),
                ref op => fresh.compute(op)?,
            };
            fresh.nodes.push(Node {
                op: node.op.clone(),
                value,
                requires_grad: node.requires_grad,
            });
        }
        Ok(fresh.nodes.into_iter().map(|n| n.value).collect())
    }

    /// Reverse sweep from a scalar node; returns gradients for every block of
    /// `params` (zero for blocks the loss does not touch).
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<Gradients, DiffError> {
        self.scalar(loss)?;
        let mut out = Gradients::zeros_like(params);
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &self.nodes[v.0].value;
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let mut acc = |v: Var, d: Matrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if out.blocks[id.0].dim() != g.dim() {
                        return Err(shape_err("backward", format!("param {} changed shape", id.0)));
                    }
                    out.blocks[id.0] += &g;
                }
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if needs(*b) {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, r) => {
                    if needs(*r) {
                        acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, g);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, &g * val(*b));
                    }
                    if needs(*b) {
                        acc(*b, &g * val(*a));
                    }
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    acc(*a, d);
                }
                Op::ConcatCols(a, b) => {
                    let split = val(*a).ncols();
                    if needs(*a) {
                        acc(*a, g.slice(s![.., ..split]).to_owned());
                    }
                    if needs(*b) {
                        acc(*b, g.slice(s![.., split..]).to_owned());
                    }
                }
                Op::EdgeDot { h, edges } => {
                    let hv = val(*h);
                    let mut d = Array2::zeros(hv.raw_dim());
                    for i in 0..edges.n_rows() {
                        for e in edges.row(i) {
                            let j = edges.col[e];
                            let ge = g[[e, 0]];
                            if ge == 0.0 {
                                continue;
                            }
                            d.row_mut(i).scaled_add(ge, &hv.row(j));
                            d.row_mut(j).scaled_add(ge, &hv.row(i));
                        }
                    }
                    acc(*h, d);
                }
                Op::SegmentSoftmax { scores, edges } => {
                    let a = &node.value;
                    let mut d = Array2::zeros(a.raw_dim());
                    for i in 0..edges.n_rows() {
                        let range = edges.row(i);
                        let dotp: f64 = range.clone().map(|e| a[[e, 0]] * g[[e, 0]]).sum();
                        for e in range {
                            d[[e, 0]] = a[[e, 0]] * (g[[e, 0]] - dotp);
                        }
                    }
                    acc(*scores, d);
                }
                Op::SpMM {
                    weights,
                    dense,
                    edges,
                } => {
                    let (w, dv) = (val(*weights), val(*dense));
                    if needs(*weights) {
                        let mut dw = Array2::zeros(w.raw_dim());
                        for i in 0..edges.n_rows() {
                            let gi = g.row(i);
                            for e in edges.row(i) {
                                dw[[e, 0]] = gi.dot(&dv.row(edges.col[e]));
                            }
                        }
                        acc(*weights, dw);
                    }
                    if needs(*dense) {
                        let mut dd = Array2::zeros(dv.raw_dim());
                        for i in 0..edges.n_rows() {
                            let gi = g.row(i);
                            for e in edges.row(i) {
                                dd.row_mut(edges.col[e]).scaled_add(w[[e, 0]], &gi);
                            }
                        }
                        acc(*dense, dd);
                    }
                }
                Op::WeightedMse {
                    pred,
                    target,
                    weights,
                    ids,
                } => {
                    let p = val(*pred);
                    let scale = g[[0, 0]] * 2.0 / ids.len() as f64;
                    let mut d = Array2::zeros(p.raw_dim());
                    for &i in ids.iter() {
                        d[[i, 0]] += scale * weights[i] * (p[[i, 0]] - target[i]);
                    }
                    acc(*pred, d);
                }
                Op::Bce { prob, labels } => {
                    let p = val(*prob);
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let mut d = Array2::zeros(p.raw_dim());
                    for (k, &l) in labels.iter().enumerate() {
                        let q = p[[k, 0]];
                        if q < BCE_CLIP || q > 1.0 - BCE_CLIP {
                            continue;
                        }
                        d[[k, 0]] = if l == 1.0 { -scale / q } else { scale / (1.0 - q) };
                    }
                    acc(*prob, d);
                }
                Op::Sum(a) => {
                    let shape = val(*a).raw_dim();
                    acc(*a, Array2::from_elem(shape, g[[0, 0]]));
                }
            }
        }
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: "backward" });
        }
        Ok(out)
    }
}
