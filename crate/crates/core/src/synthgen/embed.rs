use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use super::{Covariates, SynthError};
use crate::netgraph::Network;
use crate::rng;

const MAX_ITERS: usize = 5000;
const RESIDUAL_TOL: f64 = 1e-9;
const OVERSAMPLE: usize = 8;

/// `y = ((I + D^{-1/2} A D^{-1/2}) / 2) v`, column by column.
fn apply_shifted(net: &Network, inv_sqrt_deg: &[f64], v: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = v * 0.5;
    for i in 0..net.n() {
        for &j in net.neighbors(i) {
            let w = 0.5 * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            for c in 0..v.ncols() {
                out[(i, c)] += w * v[(j, c)];
            }
        }
    }
    out
}

fn deflate(v: &mut DMatrix<f64>, trivial: &[f64]) {
    for c in 0..v.ncols() {
        let dot: f64 = (0..v.nrows()).map(|i| v[(i, c)] * trivial[i]).sum();
        for (i, u) in trivial.iter().enumerate() {
            v[(i, c)] -= dot * u;
        }
    }
}

fn orthonormalize(v: DMatrix<f64>) -> DMatrix<f64> {
    v.qr().q()
}

/// Rayleigh-Ritz on the span of `q`: eigenpairs sorted by descending value.
fn ritz(net: &Network, inv_sqrt_deg: &[f64], q: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mq = apply_shifted(net, inv_sqrt_deg, q);
    let small = q.transpose() * &mq;
    let small = (&small + small.transpose()) * 0.5;
    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let w = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, q * &w, mq * w)
}

/// Flips each column so its first entry that is not numerically zero is positive.
pub(crate) fn fix_signs(v: &mut DMatrix<f64>) {
    for c in 0..v.ncols() {
        let scale = v.column(c).amax();
        let first = (0..v.nrows()).map(|i| v[(i, c)]).find(|x| x.abs() > 1e-10 * scale);
        if matches!(first, Some(x) if x < 0.0) {
            v.column_mut(c).neg_mut();
        }
    }
}

/// Row-normalized leading non-trivial eigenvectors of the symmetrically
/// normalized adjacency `D^{-1/2} A D^{-1/2}`.
///
/// The eigenvectors are found by subspace iteration on `(I + N) / 2`, whose
/// spectrum lies in `[0, 1]` with the same ordering, after projecting out the
/// trivial eigenvector `D^{1/2} 1`. The random start block comes from `seed`.
pub fn spectral_embed(net: &Network, d: usize, seed: u64) -> Result<Covariates, SynthError> {
    let n = net.n();
    if d == 0 || d >= n {
        return Err(SynthError::BadDimension { d, n });
    }
    net.require_no_isolated()?;
    let inv_sqrt_deg: Vec<f64> = (0..n).map(|i| 1.0 / (net.degree(i) as f64).sqrt()).collect();
    let total: f64 = (0..n).map(|i| net.degree(i) as f64).sum();
    let trivial: Vec<f64> = (0..n).map(|i| (net.degree(i) as f64 / total).sqrt()).collect();

    let k = (d + OVERSAMPLE).min(n - 1);
    let mut r = rng::stream(seed, "spectral");
    let mut q = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut r));
    deflate(&mut q, &trivial);
    q = orthonormalize(q);

    let mut vectors = q.clone();
    for _ in 0..MAX_ITERS {
        let (vals, v, mv) = ritz(net, &inv_sqrt_deg, &q);
        let residual = (0..d)
            .map(|c| (mv.column(c) - v.column(c) * vals[c]).norm())
            .fold(0.0, f64::max);
        vectors = v;
        if residual < RESIDUAL_TOL {
            break;
        }
        let mut next = mv;
        deflate(&mut next, &trivial);
        q = orthonormalize(next);
    }

    let mut lead = vectors.columns(0, d).into_owned();
    fix_signs(&mut lead);
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        let norm = lead.row(i).norm();
        if norm == 0.0 {
            return Err(SynthError::ZeroNormRow { row: i });
        }
        for c in 0..d {
            x[[i, c]] = lead[(i, c)] / norm;
        }
    }
    Covariates::new(x)
}
