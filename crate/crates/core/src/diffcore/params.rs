use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
}

/// An ordered collection of named parameter matrices.
///
/// Shapes are fixed once a block is added. The flat view concatenates the
/// blocks in insertion order, each in row-major order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a `fan_in × fan_out` weight with Glorot-uniform entries.
    pub fn add_glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn shapes(&self) -> Vec<(String, [usize; 2])> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), [p.value.nrows(), p.value.ncols()]))
            .collect()
    }

    pub fn flat_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Maps a flat coordinate to `(block, row, col)`.
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize, usize)> {
        for (k, p) in self.params.iter().enumerate() {
            if flat < p.value.len() {
                let cols = p.value.ncols();
                return Some((ParamId(k), flat / cols, flat % cols));
            }
            flat -= p.value.len();
        }
        None
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.params {
            out.extend(p.value.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), DiffError> {
        if flat.len() != self.flat_len() {
            return Err(DiffError::Shape {
                op: "set_flat",
                detail: format!("expected {} values, got {}", self.flat_len(), flat.len()),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.value.len();
            for (dst, src) in p.value.iter_mut().zip(&flat[offset..offset + len]) {
                *dst = *src;
            }
            offset += len;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// True when both sets have identical names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.shapes() == other.shapes()
    }
}

/// Gradients aligned block-for-block with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            blocks: params
                .iter()
                .map(|p| Array2::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.blocks[id.0]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
