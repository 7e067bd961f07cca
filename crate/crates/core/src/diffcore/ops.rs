//! Dense forward primitives. The tape records the same formulas.

use ndarray::{Array2, Axis};

use super::{check_finite, DiffError, Matrix};

/// Probabilities are clamped to `[BCE_CLIP, 1 - BCE_CLIP]` inside the
/// cross-entropy.
pub const BCE_CLIP: f64 = 1e-7;

pub fn affine(input: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Matrix, DiffError> {
    if input.ncols() != weight.nrows() {
        return Err(DiffError::Shape {
            op: "affine",
            detail: format!(
                "input is {}x{}, weight is {}x{}",
                input.nrows(),
                input.ncols(),
                weight.nrows(),
                weight.ncols()
            ),
        });
    }
    if bias.nrows() != 1 || bias.ncols() != weight.ncols() {
        return Err(DiffError::Shape {
            op: "affine",
            detail: format!(
                "bias is {}x{}, expected 1x{}",
                bias.nrows(),
                bias.ncols(),
                weight.ncols()
            ),
        });
    }
    let out = input.dot(weight) + bias;
    check_finite("affine", &out)?;
    Ok(out)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.mapv(sigmoid_scalar)
}

/// Row-wise softmax restricted to `support`; entries outside the support are
/// exactly zero.
pub fn masked_row_softmax(scores: &Matrix, support: &Array2<bool>) -> Result<Matrix, DiffError> {
    if scores.raw_dim() != support.raw_dim() {
        return Err(DiffError::Shape {
            op: "masked_row_softmax",
            detail: "scores and support differ in shape".into(),
        });
    }
    let mut out = Array2::zeros(scores.raw_dim());
    for (row, ((s, m), mut o)) in scores
        .axis_iter(Axis(0))
        .zip(support.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        let max = s
            .iter()
            .zip(m.iter())
            .filter(|(_, &keep)| keep)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(DiffError::EmptySupport {
                op: "masked_row_softmax",
                row,
            });
        }
        let mut total = 0.0;
        for ((o, &v), &keep) in o.iter_mut().zip(s.iter()).zip(m.iter()) {
            if keep {
                *o = (v - max).exp();
                total += *o;
            }
        }
        o.mapv_inplace(|v| v / total);
    }
    check_finite("masked_row_softmax", &out)?;
    Ok(out)
}

/// `(1/n) Σ w_i (pred_i − target_i)²`.
pub fn weighted_mse(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<f64, DiffError> {
    if pred.len() != target.len() || pred.len() != weights.len() {
        return Err(DiffError::Shape {
            op: "weighted_mse",
            detail: format!(
                "lengths {} / {} / {}",
                pred.len(),
                target.len(),
                weights.len()
            ),
        });
    }
    if let Some(k) = weights.iter().position(|w| !(*w >= 0.0)) {
        return Err(DiffError::Domain {
            op: "weighted_mse",
            detail: format!("weight {k} is negative or NaN: {}", weights[k]),
        });
    }
    if pred.is_empty() {
        return Err(DiffError::Domain {
            op: "weighted_mse",
            detail: "empty input".into(),
        });
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[BCE_CLIP, 1 − BCE_CLIP]`.
pub fn bce_loss(prob: &[f64], label: &[f64]) -> Result<f64, DiffError> {
    if prob.len() != label.len() || prob.is_empty() {
        return Err(DiffError::Shape {
            op: "bce_loss",
            detail: format!("lengths {} / {}", prob.len(), label.len()),
        });
    }
    check_labels(label)?;
    let sum: f64 = prob.iter().zip(label).map(|(&p, &l)| bce_term(p, l)).sum();
    Ok(sum / prob.len() as f64)
}

pub(crate) fn check_labels(label: &[f64]) -> Result<(), DiffError> {
    match label.iter().position(|&l| l != 0.0 && l != 1.0) {
        Some(k) => Err(DiffError::Domain {
            op: "bce_loss",
            detail: format!("label {k} is {} (expected 0 or 1)", label[k]),
        }),
        None => Ok(()),
    }
}

pub(crate) fn bce_term(p: f64, label: f64) -> f64 {
    let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    if label == 1.0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}
