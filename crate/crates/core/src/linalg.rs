//! Small dense linear-algebra helpers shared by every module.
//!
//! All symmetric positive (semi-)definite solves in the crate go through the
//! eigendecomposition wrappers here, so that the predictor, the whitening step
//! and the optimizers share one numerical path.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. The input is symmetrized first so that tiny asymmetries
/// from accumulated products do not leak into the factorization.
pub fn sym_eig_desc(matrix: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(matrix);
    let eig = sym.symmetric_eigen();
    let p = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrize(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (matrix + matrix.transpose())
}

/// Assembles `sum_i f(lambda_i) v_i v_i^T` from an eigensystem.
pub fn spectral_map(
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let mapped = DVector::from_iterator(values.len(), values.iter().map(|&v| f(v)));
    vectors * DMatrix::from_diagonal(&mapped) * vectors.transpose()
}

/// Symmetric square root of a PSD matrix; eigenvalues below zero are clamped.
pub fn psd_sqrt(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eig_desc(matrix);
    spectral_map(&values, &vectors, |v| v.max(0.0).sqrt())
}

/// Pseudo-inverse of a symmetric PSD matrix through its eigensystem.
/// Eigenvalues at or below `cutoff_rel * lambda_max` are truncated to zero.
/// Returns the pseudo-inverse and the number of retained directions.
pub fn pinv_psd(
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    cutoff_rel: f64,
) -> (DMatrix<f64>, usize) {
    let scale = values.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    let cutoff = cutoff_rel * scale;
    let kept = values.iter().filter(|&&v| v > cutoff).count();
    let inv = spectral_map(values, vectors, |v| if v > cutoff { 1.0 / v } else { 0.0 });
    (inv, kept)
}

/// Solves `A x = b` for symmetric positive definite `A` via its eigensystem.
pub fn solve_spd(matrix: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let (values, vectors) = sym_eig_desc(matrix);
    let projected = vectors.transpose() * rhs;
    let scaled = DVector::from_iterator(
        values.len(),
        projected
            .iter()
            .zip(values.iter())
            .map(|(&c, &v)| if v > 0.0 { c / v } else { 0.0 }),
    );
    vectors * scaled
}

/// Largest absolute entry, used by the tolerance checks.
pub fn max_abs(matrix: &DMatrix<f64>) -> f64 {
    matrix.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()))
}

/// Pairwise (cascade) summation: an order-stable reduction whose result does
/// not depend on chunking, so parallel drivers can reproduce it exactly.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        len => {
            let mid = len / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Mean and standard error of a slice of replicate values.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let sq: Vec<f64> = values.iter().map(|&v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Jackknife standard error from leave-one-out estimates.
pub fn jackknife_se(leave_one_out: &[f64]) -> f64 {
    let n = leave_one_out.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = pairwise_sum(leave_one_out) / n as f64;
    let sq: Vec<f64> = leave_one_out
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .collect();
    ((n as f64 - 1.0) / n as f64 * pairwise_sum(&sq)).sqrt()
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(&a, &b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|&a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
