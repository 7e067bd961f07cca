//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use super::tape::{Tape, Var};
use super::{grad, DiffError};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// When set, at most this many coordinates per block are checked,
    /// chosen by a seeded sample. `None` checks every coordinate.
    pub max_coords_per_block: Option<usize>,
    pub seed: u64,
    /// Leave out coordinates whose `±h` probes flip a ReLU, where the
    /// central difference straddles a kink and is not a derivative.
    #[serde(default = "yes")]
    pub skip_kinks: bool,
}

fn yes() -> bool {
    true
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords_per_block: None,
            seed: 0,
            skip_kinks: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Block name and `(row, col)` of the worst coordinate.
    pub block: String,
    pub row: usize,
    pub col: usize,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates left out because a probe crossed a ReLU kink.
    pub kinks_skipped: usize,
    pub passed: bool,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of `loss_fn` against central differences.
pub fn grad_check<F>(
    params: &ParamSet,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, DiffError>,
{
    let (_, analytic) = grad(params, &loss_fn)?;
    compare_gradients(params, loss_fn, &analytic, opts)
}

/// Compares externally supplied gradients against central differences.
pub fn compare_gradients<F>(
    params: &ParamSet,
    loss_fn: F,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, DiffError>,
{
    let flat_analytic = analytic.to_flat();
    if flat_analytic.len() != params.flat_len() {
        return Err(DiffError::Shape {
            op: "grad_check",
            detail: "gradient layout differs from parameters".into(),
        });
    }
    let coords = select_coords(params, opts);
    let eval = |p: &ParamSet| -> Result<(f64, Vec<bool>), DiffError> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, p)?;
        Ok((tape.scalar(loss)?, tape.relu_pattern()))
    };
    let base_pattern = eval(params)?.1;
    let mut probe = params.clone();
    let mut worst: Option<GradCheckReport> = None;
    let mut kinks_skipped = 0;
    for &flat in &coords {
        let (id, r, c) = params.locate(flat).expect("coordinate in range");
        let orig = params.get(id)[[r, c]];
        probe.get_mut(id)[[r, c]] = orig + opts.h;
        let (plus, plus_pattern) = eval(&probe)?;
        probe.get_mut(id)[[r, c]] = orig - opts.h;
        let (minus, minus_pattern) = eval(&probe)?;
        probe.get_mut(id)[[r, c]] = orig;
        if opts.skip_kinks && (plus_pattern != base_pattern || minus_pattern != base_pattern) {
            kinks_skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.h);
        let a = flat_analytic[flat];
        let err = relative_error(a, numeric);
        if worst.as_ref().is_none_or(|w| err > w.max_rel_err) {
            worst = Some(GradCheckReport {
                max_rel_err: err,
                block: params.name(id).to_string(),
                row: r,
                col: c,
                flat_index: flat,
                analytic: a,
                numeric,
                coords_checked: 0,
                kinks_skipped: 0,
                passed: false,
            });
        }
    }
    let mut report = worst.unwrap_or(GradCheckReport {
        max_rel_err: 0.0,
        block: String::new(),
        row: 0,
        col: 0,
        flat_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
        kinks_skipped: 0,
        passed: true,
    });
    report.kinks_skipped = kinks_skipped;
    report.coords_checked = coords.len() - kinks_skipped;
    report.passed = report.max_rel_err <= opts.tol;
    Ok(report)
}

/// Flat indices `grad_check` will visit under `opts`.
pub fn select_coords(params: &ParamSet, opts: &GradCheckOptions) -> Vec<usize> {
    let mut coords = Vec::new();
    let mut offset = 0;
    let mut rng = rng::stream(opts.seed, "grad_check");
    for p in params.iter() {
        let len = p.value.len();
        match opts.max_coords_per_block {
            Some(k) if k < len => {
                let mut picked = sample(&mut rng, len, k).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|c| offset + c));
            }
            _ => coords.extend(offset..offset + len),
        }
        offset += len;
    }
    coords
}
