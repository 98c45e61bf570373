//! Small dense-matrix helpers shared by the bound recursion and the filters.

use log::debug;
use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Relative size of the first ridge added to a matrix that fails Cholesky.
pub const RIDGE_BASE: f64 = 1e-9;
/// Growth factor between successive ridge attempts.
pub const RIDGE_GROWTH: f64 = 100.0;
/// Number of escalations after the first ridge before giving up.
pub const RIDGE_ESCALATIONS: u32 = 3;

/// `A <- (A + Aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn symmetrized(mut a: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut a);
    a
}

/// Cholesky factor of a symmetric matrix, retried with a growing ridge
/// `λI`, `λ = 1e-9·(1 + tr(A)/n)`, if the plain factorization fails.
///
/// Returns the factor and the number of ridge additions that were needed.
pub fn regularized_cholesky(
    a: &DMatrix<f64>,
    what: &'static str,
    t: usize,
) -> Result<(Cholesky<f64, Dyn>, u32)> {
    let n = a.nrows();
    let a = symmetrized(a.clone());
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok((chol, 0));
    }
    let mut lambda = RIDGE_BASE * (1.0 + (a.trace() / n as f64).abs());
    for attempt in 0..=RIDGE_ESCALATIONS {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += lambda;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            debug!("{what} at t={t}: regularized with λ={lambda:e}");
            return Ok((chol, attempt + 1));
        }
        lambda *= RIDGE_GROWTH;
    }
    Err(Error::Singular {
        what,
        t,
        condition: condition_number(&a),
    })
}

/// Inverse of an SPD matrix via [`regularized_cholesky`]; output symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>, what: &'static str, t: usize) -> Result<(DMatrix<f64>, u32)> {
    if a.nrows() == 0 {
        return Ok((DMatrix::zeros(0, 0), 0));
    }
    let (chol, events) = regularized_cholesky(a, what, t)?;
    Ok((symmetrized(chol.inverse()), events))
}

/// Eigenvalue ratio `λmax/λmin` of a symmetric matrix; `inf` if singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let eig = symmetrized(a.clone()).symmetric_eigenvalues();
    let max = eig.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a symmetric matrix (0 for an empty matrix).
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    symmetrized(a.clone())
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}

/// Symmetric square root factor `S` with `S Sᵀ = A` for a PSD matrix;
/// negative eigenvalues are clamped to zero.
pub fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    if let Some(chol) = Cholesky::new(symmetrized(a.clone())) {
        return chol.unpack();
    }
    let eig = symmetrized(a.clone()).symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    scaled
}

/// Sum with a fixed pairwise tree topology determined only by `items.len()`.
pub fn pairwise_sum(items: &[DMatrix<f64>]) -> Option<DMatrix<f64>> {
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        len => {
            let (lo, hi) = items.split_at(len / 2);
            let mut acc = pairwise_sum(lo)?;
            acc += pairwise_sum(hi)?;
            Some(acc)
        }
    }
}

/// Sum of scalars that is independent of input order: values are sorted
/// before a pairwise reduction.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    fn tree(v: &[f64]) -> f64 {
        match v.len() {
            0 => 0.0,
            1 => v[0],
            len => {
                let (lo, hi) = v.split_at(len / 2);
                tree(lo) + tree(hi)
            }
        }
    }
    tree(values)
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
