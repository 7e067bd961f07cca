//! Estimation of individual direct and spillover treatment effects on
//! networked observational data under heterogeneous interference.
//!
//! The crate is organised bottom-up:
//!
//! - [`netgraph`]: undirected graphs, validation and edge-list I/O.
//! - [`synthgen`]: semi-synthetic benchmark generation with a closed-form
//!   potential-outcome oracle.
//! - [`diffcore`]: a small reverse-mode differentiation tape, layers,
//!   losses, Adam and finite-difference gradient checking.
//! - [`dwr_model`]: encoder, graph attention, estimated exposure,
//!   attention-weighted aggregation and the two outcome heads.
//! - [`reweighter`]: permutation calibration data, the discriminator and
//!   density-ratio sample weights.
//! - [`trainer`]: the alternating outcome/weight training loop, splits and
//!   checkpoints.
//! - [`evalkit`]: effect metrics, repeated experiments and sweeps.

pub mod diffcore;
pub mod dwr_model;
pub mod evalkit;
pub mod netgraph;
pub mod reweighter;
pub mod rng;
pub mod synthgen;
pub mod trainer;
pub mod tsv;

pub use netgraph::{DegreeStats, GraphError, Network};
