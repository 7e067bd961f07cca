//! Minimal differentiable-computation kernel.
//!
//! Values are dense `f64` matrices. A [`Tape`] records a forward pass built
//! from a fixed set of primitives (affine maps, activations, edge-wise
//! attention kernels, losses) and replays it backwards to obtain exact
//! gradients for every entry of a [`ParamSet`]. [`grad_check`] compares
//! those gradients against central finite differences.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod ops;
mod params;
mod tape;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{compare_gradients, grad_check, relative_error, select_coords, GradCheckOptions, GradCheckReport};
pub use ops::{
    affine, bce_loss, masked_row_softmax, relu, sigmoid, weighted_mse, BCE_CLIP,
};
pub(crate) use ops::sigmoid_scalar;
pub use params::{Gradients, Param, ParamId, ParamSet};
pub use tape::{Tape, Var};

pub type Matrix = ndarray::Array2<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{op}: row {row} has an empty support")]
    EmptySupport { op: &'static str, row: usize },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
}

pub(crate) fn check_finite(op: &'static str, m: &Matrix) -> Result<(), DiffError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite { op })
    }
}

/// Computes the value and exact gradient of a scalar loss built on a tape.
pub fn grad<F>(params: &ParamSet, loss_fn: F) -> Result<(f64, Gradients), DiffError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let value = tape.scalar(loss)?;
    let grads = tape.backward(loss, params)?;
    Ok((value, grads))
}

/// Evaluates a scalar loss without keeping the tape around.
pub fn value<F>(params: &ParamSet, loss_fn: F) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    tape.scalar(loss)
}
