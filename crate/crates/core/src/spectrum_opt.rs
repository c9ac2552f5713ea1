//! Spectrum-only representation design in the aligned-eigenvector case.
//!
//! With the penalty eigenbasis pinned to the covariance eigenbasis, only the
//! per-direction weights remain free. The change of variables
//! `x_i = 1 / (1 + eta_i b0 / r_i)` turns the fixed-point constraint into the
//! linear constraint `sum x_i = h - n` over the box `[0, 1]^h`, where the
//! variance factor and both bias objectives become convex:
//!
//! ```text
//! V(x) = (2n - h + S) / (h - n - S),      S = sum x_i^2
//! B_avg(x) = q^{-1} sum phi_i x_i^2,      phi_i = eta_i theta_i
//! B_worst(x) = c_radius * sigma_max(B*^T (sum eta_i x_i^2 u_i u_i^T) B*)
//! ```
//!
//! `x_i = 1` encodes a direction discarded outright (infinite weight); the
//! inverse map is `r_i = c eta_i x_i / (1 - x_i)` for any scale `c > 0`,
//! which makes the fixed point evaluate to exactly `b0 = c`.
//!
//! The variance factor is minimized alone by weights proportional to the
//! covariance spectrum. The averaged bias has a phase transition in the
//! number `h1` of directions with nonzero alignment product: when `h1 <= n`
//! (hard selection) every aligned direction is kept with arbitrary positive
//! weight and the bias infimum is zero (approached as the kept weights
//! shrink); when `h1 > n` (soft selection) a water-filling-style solution
//! keeps the top `h0` directions with graded weights and discards the rest.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::CovarianceModel;
use crate::penalty::Penalty;
use crate::rng;

/// Relative tolerance under which an alignment product counts as zero.
pub const ALIGNMENT_TOLERANCE: f64 = 1e-12;

/// The aligned-basis optimization data: covariance eigenvalues, alignment
/// coefficients and their products, sorted by nonincreasing product with the
/// permutation retained.
#[derive(Debug, Clone)]
pub struct SpectrumProblem {
    /// Covariance eigenvalues, in product order.
    pub eigenvalues: DVector<f64>,
    /// Alignment coefficients `theta_i = u_i^T B* P B*^T u_i`, product order.
    pub alignments: DVector<f64>,
    /// Products `phi_i = eta_i theta_i`, nonincreasing.
    pub products: DVector<f64>,
    /// `permutation[j]` is the original (descending-eigenvalue) index of
    /// sorted position `j`.
    pub permutation: Vec<usize>,
    /// Covariance eigenvectors as columns, in product order.
    pub basis: DMatrix<f64>,
    /// Ground-truth representation (needed by the worst-case objective).
    pub bstar: DMatrix<f64>,
    pub n: usize,
    /// Rank of the covariance.
    pub h: usize,
    /// Number of nonzero products.
    pub h1: usize,
    pub q: usize,
    pub sigma2: f64,
    /// Task-ball radius for the worst-case objective.
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRegime {
    /// `h1 <= n`: keep every aligned direction, bias infimum zero.
    Hard,
    /// `h1 > n`: graded weights on the top `h0` directions.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumObjective {
    Averaged,
    Worst,
}

/// A weight assignment over the `h` ranked directions.
#[derive(Debug, Clone)]
pub struct SpectrumSolution {
    /// Weights `r_i` over product order, `+infinity` allowed.
    pub weights: DVector<f64>,
    /// The same solution in constraint space.
    pub x: DVector<f64>,
    pub regime: SelectionRegime,
    /// Soft-selection cutoff `h0` (number of kept directions), when defined.
    pub cutoff: Option<usize>,
    /// Optimal objective value.
    pub value: f64,
    /// Free scale `c` realized in the weights (`b0 = c` downstream).
    pub scale: f64,
    /// Set when an iterative solver stopped on its budget rather than the
    /// tolerance.
    pub converged: bool,
}

/// Computes the alignment data for a problem in the aligned-basis setting.
/// `prior` is the scaled `q x q` task prior.
#[allow(clippy::too_many_arguments)]
pub fn alignment_coefficients(
    covariance: &CovarianceModel,
    bstar: &DMatrix<f64>,
    prior: &DMatrix<f64>,
    n: usize,
    sigma2: f64,
    radius: f64,
) -> SpectrumProblem {
    let p = covariance.dim();
    let q = bstar.ncols();
    let weighted = bstar * prior * bstar.transpose();
    let mut entries: Vec<(usize, f64, f64, f64)> = (0..p)
        .map(|i| {
            let u = covariance.eigenvectors().column(i);
            let theta = ((&weighted) * u).dot(&u).max(0.0);
            let eta = covariance.eigenvalues()[i];
            (i, eta, theta, eta * theta)
        })
        .collect();
    // Stable sort by nonincreasing product; ties keep the original
    // (descending-eigenvalue) order, so zero-eigenvalue directions sort last.
    entries.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap_or(core::cmp::Ordering::Equal));

    let eigenvalues = DVector::from_iterator(p, entries.iter().map(|e| e.1));
    let alignments = DVector::from_iterator(p, entries.iter().map(|e| e.2));
    let products = DVector::from_iterator(p, entries.iter().map(|e| e.3));
    let permutation: Vec<usize> = entries.iter().map(|e| e.0).collect();
    let mut basis = DMatrix::zeros(p, p);
    for (slot, &(orig, ..)) in entries.iter().enumerate() {
        basis.set_column(slot, &covariance.eigenvectors().column(orig));
    }
    let top = products[0];
    let h1 = products
        .iter()
        .filter(|&&v| v > ALIGNMENT_TOLERANCE * top)
        .count();
    SpectrumProblem {
        eigenvalues,
        alignments,
        products,
        permutation,
        basis,
        bstar: bstar.clone(),
        n,
        h: covariance.rank(),
        h1,
        q,
        sigma2,
        radius,
    }
}

impl SpectrumProblem {
    pub fn regime(&self) -> SelectionRegime {
        if self.h1 <= self.n {
            SelectionRegime::Hard
        } else {
            SelectionRegime::Soft
        }
    }

    /// Realizes a weight vector (product order, length `h`) as a penalty over
    /// the full space; directions beyond the covariance rank get weight
    /// `scale`, which never enters any risk quantity.
    pub fn realize_penalty(&self, weights: &DVector<f64>, scale: f64) -> Result<Penalty> {
        let p = self.basis.nrows();
        let mut full = DVector::from_element(p, scale);
        for i in 0..self.h {
            full[i] = weights[i];
        }
        Penalty::from_eigenbasis(self.basis.clone(), full)
    }
}

/// The soft-selection cutoff: the largest `m` in `{n+1, ..., h1}` such that
/// `(m - n)^{-1} sum_{i <= m} phi_m / phi_i >= 1` (with `m = n` always
/// admissible). Requires `n < h1`.
pub fn compute_h0(products: &DVector<f64>, h1: usize, n: usize) -> Result<usize> {
    if n >= h1 {
        return Err(Error::InvalidArgument(alloc::format!(
            "hard-selection regime (h1 = {h1} <= n = {n}): the cutoff is undefined"
        )));
    }
    let mut h0 = n;
    for m in (n + 1)..=h1 {
        let terms: Vec<f64> = (0..m).map(|i| products[m - 1] / products[i]).collect();
        let value = linalg::pairwise_sum(&terms) / (m - n) as f64;
        if value >= 1.0 {
            h0 = m;
        } else {
            break;
        }
    }
    Ok(h0)
}

/// Exhaustive check of the cutoff inequality at one candidate `m`.
pub fn cutoff_inequality_holds(products: &DVector<f64>, n: usize, m: usize) -> bool {
    if m == n {
        return true;
    }
    let terms: Vec<f64> = (0..m).map(|i| products[m - 1] / products[i]).collect();
    linalg::pairwise_sum(&terms) / (m - n) as f64 >= 1.0
}

/// Minimizes the variance factor alone: weights proportional to the
/// covariance spectrum, optimal value `(h/n - 1)^{-1}`, constraint point
/// `x = (1 - n/h) 1`.
pub fn minimize_variance_spectrum(
    eigenvalues: &DVector<f64>,
    n: usize,
    h: usize,
    scale: f64,
) -> Result<SpectrumSolution> {
    if n >= h {
        return Err(Error::SampleRich { n, h });
    }
    let weights = DVector::from_iterator(h, (0..h).map(|i| scale * eigenvalues[i]));
    let x = DVector::from_element(h, 1.0 - n as f64 / h as f64);
    Ok(SpectrumSolution {
        weights,
        x,
        regime: SelectionRegime::Soft,
        cutoff: None,
        value: 1.0 / (h as f64 / n as f64 - 1.0),
        scale,
        converged: true,
    })
}

/// Minimizes the averaged bias alone. Soft regime: graded weights
/// `r_i = c eta_i ((m - n)^{-1} sum_{j <= h0} phi_i / phi_j - 1)^{-1}` on the
/// top `h0` directions and infinity beyond, with value
/// `q^{-1} sum_{h0 < i <= h1} phi_i + (q (h0 - n)^{-2} sum_{i <= h0}
/// phi_i^{-1})^{-1}`. Hard regime: finite weights `c eta_i` on the `h1`
/// aligned directions, infinity beyond; the infimum (value zero) is attained
/// along `c -> 0`.
pub fn minimize_bias_spectrum(problem: &SpectrumProblem, scale: f64) -> Result<SpectrumSolution> {
    let (n, h, h1, q) = (problem.n, problem.h, problem.h1, problem.q);
    if n >= h {
        return Err(Error::SampleRich { n, h });
    }
    match problem.regime() {
        SelectionRegime::Hard => {
            let mut weights = DVector::from_element(h, f64::INFINITY);
            let mut x = DVector::from_element(h, 1.0);
            for i in 0..h1 {
                weights[i] = scale * problem.eigenvalues[i];
                // x_i = 1 / (1 + eta_i c / r_i) = 1/2 at r_i = c eta_i.
                x[i] = 0.5;
            }
            Ok(SpectrumSolution {
                weights,
                x,
                regime: SelectionRegime::Hard,
                cutoff: None,
                value: 0.0,
                scale,
                converged: true,
            })
        }
        SelectionRegime::Soft => {
            let h0 = compute_h0(&problem.products, h1, n)?;
            let mut weights = DVector::from_element(h, f64::INFINITY);
            let mut x = DVector::from_element(h, 1.0);
            let deficit = (h0 - n) as f64;
            for i in 0..h0 {
                let ratio_sum: f64 = (0..h0)
                    .map(|j| problem.products[i] / problem.products[j])
                    .sum();
                x[i] = (1.0 - n as f64 / h0 as f64) / (ratio_sum / h0 as f64);
                weights[i] = scale * problem.eigenvalues[i] * (ratio_sum / deficit - 1.0).recip();
            }
            let tail: f64 = (h0..h1).map(|i| problem.products[i]).sum();
            let inv_sum: f64 = (0..h0).map(|i| 1.0 / problem.products[i]).sum();
            let value = tail / q as f64 + (q as f64 / (deficit * deficit) * inv_sum).recip();
            Ok(SpectrumSolution {
                weights,
                x,
                regime: SelectionRegime::Soft,
                cutoff: Some(h0),
                value,
                scale,
                converged: true,
            })
        }
    }
}

/// `x_i = 1 / (1 + eta_i c / r_i)`; infinite weights map to 1, zero to 0.
pub fn to_x_space(weights: &DVector<f64>, eigenvalues: &DVector<f64>, scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        weights.len(),
        weights.iter().zip(eigenvalues.iter()).map(|(&r, &eta)| {
            if r.is_infinite() {
                1.0
            } else if r == 0.0 {
                0.0
            } else {
                1.0 / (1.0 + eta * scale / r)
            }
        }),
    )
}

/// Inverse of [`to_x_space`]: `r_i = c eta_i x_i / (1 - x_i)`.
pub fn from_x_space(x: &DVector<f64>, eigenvalues: &DVector<f64>, scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        x.iter().zip(eigenvalues.iter()).map(|(&xi, &eta)| {
            if xi >= 1.0 {
                f64::INFINITY
            } else {
                scale * eta * xi / (1.0 - xi)
            }
        }),
    )
}

/// Checks membership of the constraint set `{x in [0,1]^h : sum x = h - n}`.
pub fn is_feasible(x: &DVector<f64>, n: usize, tolerance: f64) -> bool {
    let h = x.len();
    if x.iter().any(|&v| !(-tolerance..=1.0 + tolerance).contains(&v)) {
        return false;
    }
    let total: f64 = x.iter().sum();
    (total - (h - n) as f64).abs() <= tolerance * h as f64
}

/// Euclidean projection onto `{x in [0,1]^h : sum x = h - n}` by bisection on
/// the shift `nu` in `x = clip(y - nu, 0, 1)`; the set is nonempty whenever
/// `n < h`.
pub fn project_feasible(y: &DVector<f64>, n: usize) -> DVector<f64> {
    let h = y.len();
    let target = (h - n) as f64;
    let clip_sum = |nu: f64| -> f64 {
        y.iter()
            .map(|&v| (v - nu).clamp(0.0, 1.0))
            .sum::<f64>()
    };
    let mut lo = y.min() - 1.0;
    let mut hi = y.max();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if clip_sum(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    DVector::from_iterator(h, y.iter().map(|&v| (v - nu).clamp(0.0, 1.0)))
}

/// Constraint-space variance factor `(2n - h + S)/(h - n - S)`, infinite at
/// the degenerate boundary `S = h - n`.
pub fn variance_factor_x(x: &DVector<f64>, n: usize) -> f64 {
    let h = x.len();
    let s: f64 = x.iter().map(|&v| v * v).sum();
    let denom = (h - n) as f64 - s;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    (2.0 * n as f64 - h as f64 + s) / denom
}

/// Constraint-space averaged bias `q^{-1} sum phi_i x_i^2`.
pub fn averaged_bias_x(x: &DVector<f64>, problem: &SpectrumProblem) -> f64 {
    let terms: Vec<f64> = (0..x.len()).map(|i| problem.products[i] * x[i] * x[i]).collect();
    linalg::pairwise_sum(&terms) / problem.q as f64
}

/// Constraint-space worst-case bias: `radius` times the top eigenvalue of
/// `B*^T (sum eta_i x_i^2 u_i u_i^T) B*`.
pub fn worst_bias_x(x: &DVector<f64>, problem: &SpectrumProblem) -> f64 {
    let q = problem.q;
    let mut moment = DMatrix::zeros(q, q);
    for i in 0..x.len() {
        let z = problem.bstar.transpose() * problem.basis.column(i);
        moment += problem.eigenvalues[i] * x[i] * x[i] * &z * z.transpose();
    }
    let (values, _) = linalg::sym_eig_desc(&moment);
    problem.radius * values[0]
}

/// Full objective in constraint space.
fn objective_x(
    x: &DVector<f64>,
    problem: &SpectrumProblem,
    objective: SpectrumObjective,
    relaxed: bool,
) -> f64 {
    let v = variance_factor_x(x, problem.n);
    if !v.is_finite() {
        return f64::INFINITY;
    }
    let bias = match objective {
        SpectrumObjective::Averaged => averaged_bias_x(x, problem),
        SpectrumObjective::Worst => worst_bias_x(x, problem),
    };
    if relaxed {
        // Upper bound: the product bias * variance is replaced by the square
        // of their average.
        let half = 0.5 * (bias + v);
        bias + half * half + problem.sigma2 * v
    } else {
        bias + (bias + problem.sigma2) * v
    }
}

/// Gradient of the constraint-space objective.
fn objective_grad_x(
    x: &DVector<f64>,
    problem: &SpectrumProblem,
    objective: SpectrumObjective,
    relaxed: bool,
) -> DVector<f64> {
    let h = x.len();
    let n = problem.n;
    let s: f64 = x.iter().map(|&v| v * v).sum();
    let denom = (h - n) as f64 - s;
    let v = (2.0 * n as f64 - (h as f64) + s) / denom;
    // dV/dS with S = sum x^2.
    let dv_ds = n as f64 / (denom * denom);

    let (bias, bias_grad) = match objective {
        SpectrumObjective::Averaged => {
            let bias = averaged_bias_x(x, problem);
            let grad = DVector::from_iterator(
                h,
                (0..h).map(|i| 2.0 * problem.products[i] * x[i] / problem.q as f64),
            );
            (bias, grad)
        }
        SpectrumObjective::Worst => {
            // Danskin: differentiate through the top eigenvector held fixed.
            let q = problem.q;
            let mut moment = DMatrix::zeros(q, q);
            let mut z_cols: Vec<DVector<f64>> = Vec::with_capacity(h);
            for i in 0..h {
                let z = problem.bstar.transpose() * problem.basis.column(i);
                moment += problem.eigenvalues[i] * x[i] * x[i] * &z * z.transpose();
                z_cols.push(z);
            }
            let (values, vectors) = linalg::sym_eig_desc(&moment);
            let top: DVector<f64> = vectors.column(0).into_owned();
            let bias = problem.radius * values[0];
            let grad = DVector::from_iterator(
                h,
                (0..h).map(|i| {
                    let overlap = z_cols[i].dot(&top);
                    2.0 * problem.radius * problem.eigenvalues[i] * x[i] * overlap * overlap
                }),
            );
            (bias, grad)
        }
    };

    let (bias_coeff, v_coeff) = if relaxed {
        let half = 0.5 * (bias + v);
        (1.0 + half, half + problem.sigma2)
    } else {
        (1.0 + v, bias + problem.sigma2)
    };
    let mut grad = bias_grad * bias_coeff;
    for i in 0..h {
        grad[i] += v_coeff * dv_ds * 2.0 * x[i];
    }
    grad
}

/// Projected gradient descent with backtracking on the constraint set.
fn projected_gradient(
    x0: DVector<f64>,
    problem: &SpectrumProblem,
    objective: SpectrumObjective,
    relaxed: bool,
    max_iters: usize,
) -> (DVector<f64>, f64, bool) {
    let n = problem.n;
    let mut x = project_feasible(&x0, n);
    let mut value = objective_x(&x, problem, objective, relaxed);
    let mut step = 1.0;
    let mut converged = false;
    for _ in 0..max_iters {
        let grad = objective_grad_x(&x, problem, objective, relaxed);
        let mut accepted = false;
        let mut t = step;
        for _ in 0..60 {
            let candidate = project_feasible(&(&x - t * &grad), n);
            let cand_value = objective_x(&candidate, problem, objective, relaxed);
            let decrease = grad.dot(&(&x - &candidate));
            if cand_value <= value - 1e-4 * decrease {
                let moved = (&candidate - &x).norm();
                x = candidate;
                let improved = value - cand_value;
                value = cand_value;
                step = (t * 2.0).min(1e6);
                accepted = true;
                if moved <= 1e-14 * (1.0 + x.norm()) || improved <= 1e-15 * (1.0 + value.abs()) {
                    converged = true;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted || converged {
            converged = converged || !accepted;
            break;
        }
    }
    (x, value, converged)
}

/// Solves the relaxed convex program and certifies that the exact objective
/// at the solution does not exceed the relaxed value.
pub fn solve_relaxed(
    problem: &SpectrumProblem,
    objective: SpectrumObjective,
) -> Result<SpectrumSolution> {
    let (n, h) = (problem.n, problem.h);
    if n >= h {
        return Err(Error::SampleRich { n, h });
    }
    let uniform = DVector::from_element(h, 1.0 - n as f64 / h as f64);
    let (x, value, converged) = projected_gradient(uniform, problem, objective, true, 2000);
    let exact = objective_x(&x, problem, objective, false);
    debug_assert!(
        exact <= value + 1e-9,
        "relaxation must upper-bound the exact objective"
    );
    let scale = 1.0;
    let weights = from_x_space(&x, &problem.eigenvalues.rows(0, h).into_owned(), scale);
    Ok(SpectrumSolution {
        weights,
        x,
        regime: problem.regime(),
        cutoff: None,
        value,
        scale,
        converged,
    })
}

/// Minimizes the exact objective by multi-start projected gradient descent.
/// Not guaranteed global (the product term can break convexity); validated
/// against grid oracles at small `h` in the tests.
pub fn solve_direct(
    problem: &SpectrumProblem,
    objective: SpectrumObjective,
    starts: usize,
    seed: u64,
) -> Result<SpectrumSolution> {
    let (n, h) = (problem.n, problem.h);
    if n >= h {
        return Err(Error::SampleRich { n, h });
    }
    let mut best_x = DVector::from_element(h, 1.0 - n as f64 / h as f64);
    let mut best_value = f64::INFINITY;
    let mut best_converged = false;
    for start in 0..starts.max(1) {
        let x0 = if start == 0 {
            DVector::from_element(h, 1.0 - n as f64 / h as f64)
        } else {
            let mut r = rng::stream_rng(seed, start as u64);
            DVector::from_fn(h, |_, _| {
                use rand::Rng;
                r.random::<f64>()
            })
        };
        let (x, value, converged) = projected_gradient(x0, problem, objective, false, 2000);
        if value < best_value {
            best_value = value;
            best_x = x;
            best_converged = converged;
        }
    }
    let scale = 1.0;
    let weights = from_x_space(&best_x, &problem.eigenvalues.rows(0, h).into_owned(), scale);
    Ok(SpectrumSolution {
        weights,
        x: best_x,
        regime: problem.regime(),
        cutoff: None,
        value: best_value,
        scale,
        converged: best_converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics;
    use crate::rng::{standard_normal_matrix, stream_rng};
    use approx::assert_relative_eq;

    /// Builds a single-task problem whose alignment coefficients, in the
    /// covariance's descending-eigenvalue order, equal `theta`: the task
    /// column is assembled in the model's own eigenbasis.
    fn diagonal_problem(
        eta_desc: &[f64],
        theta: &[f64],
        n: usize,
        q: usize,
        sigma2: f64,
        radius: f64,
    ) -> SpectrumProblem {
        let p = eta_desc.len();
        assert_eq!(q, 1, "diagonal helper uses a single task column");
        let cov = CovarianceModel::from_matrix(DMatrix::from_diagonal(
            &DVector::from_column_slice(eta_desc),
        ))
        .unwrap();
        let mut b = DVector::zeros(p);
        for (i, t) in theta.iter().enumerate() {
            b += t.sqrt() * cov.eigenvectors().column(i);
        }
        let bstar = DMatrix::from_column_slice(p, 1, b.as_slice());
        alignment_coefficients(&cov, &bstar, &DMatrix::identity(1, 1), n, sigma2, radius)
    }

    #[test]
    fn alignment_zero_prior_kills_everything() {
        let mut rng = stream_rng(401, 0);
        let cov = CovarianceModel::ar1(0.3, 5).unwrap();
        let bstar = standard_normal_matrix(5, 2, &mut rng);
        let problem =
            alignment_coefficients(&cov, &bstar, &DMatrix::zeros(2, 2), 2, 1.0, 1.0);
        assert_eq!(problem.h1, 0);
        assert!(problem.products.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alignment_identity_case() {
        // B* B*^T = I and identity prior: theta_i = 1, phi_i = eta_i.
        let p = 4;
        let cov = CovarianceModel::ar1(0.5, p).unwrap();
        let bstar = DMatrix::<f64>::identity(p, p);
        let problem =
            alignment_coefficients(&cov, &bstar, &DMatrix::identity(p, p), 2, 1.0, 1.0);
        assert_eq!(problem.h1, p);
        for i in 0..p {
            assert_relative_eq!(problem.alignments[i], 1.0, epsilon = 1e-10);
            assert_relative_eq!(
                problem.products[i],
                problem.eigenvalues[i],
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn alignment_trace_identity() {
        // sum_i eta_i theta_i = tr(Sigma B P B^T) when the basis diagonalizes
        // the covariance.
        let mut rng = stream_rng(402, 0);
        let p = 6;
        let q = 3;
        let cov = CovarianceModel::wishart_jitter(p, p, 0.01, &mut rng);
        let bstar = standard_normal_matrix(p, q, &mut rng);
        let root = standard_normal_matrix(q, q, &mut rng);
        let prior = &root * root.transpose();
        let problem = alignment_coefficients(&cov, &bstar, &prior, 2, 1.0, 1.0);
        let trace = (cov.matrix() * &bstar * &prior * bstar.transpose()).trace();
        let total: f64 = problem.products.iter().sum();
        assert_relative_eq!(total, trace, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn cutoff_worked_examples() {
        // phi = [4, 2, 1], n = 2: the inequality holds at m = 3.
        let products = DVector::from_column_slice(&[4.0, 2.0, 1.0]);
        assert_eq!(compute_h0(&products, 3, 2).unwrap(), 3);
        // phi = [10, 1, 0.1], n = 1: fails at m = 3, so h0 = 2.
        let products = DVector::from_column_slice(&[10.0, 1.0, 0.1]);
        assert_eq!(compute_h0(&products, 3, 1).unwrap(), 2);
        // Equal products: always h0 = h1.
        let products = DVector::from_element(6, 1.3);
        for n in 1..6 {
            assert_eq!(compute_h0(&products, 6, n).unwrap(), 6);
        }
        // Hard regime is an error.
        let products = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        assert!(compute_h0(&products, 1, 2).is_err());
    }

    #[test]
    fn cutoff_matches_exhaustive_scan_and_prefix_property() {
        for trial in 0..1000_u64 {
            let mut r = stream_rng(403, trial);
            use rand::Rng;
            let h1 = 2 + (r.random::<u64>() % 29) as usize;
            let n = 1 + (r.random::<u64>() % (h1 as u64 - 1)) as usize;
            let mut products: Vec<f64> =
                (0..h1).map(|_| (r.random::<f64>() * 4.0).exp()).collect();
            products.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let products = DVector::from_vec(products);
            let h0 = compute_h0(&products, h1, n).unwrap();
            // The admissible set must be exactly the prefix {n, ..., h0}.
            for m in n..=h1 {
                assert_eq!(
                    cutoff_inequality_holds(&products, n, m),
                    m <= h0,
                    "trial {trial}: prefix property broken at m = {m} (h0 = {h0})"
                );
            }
        }
    }

    #[test]
    fn variance_minimizer_through_full_pipeline() {
        // Weights c * eta realize the optimal variance factor (h/n - 1)^{-1}
        // exactly, for several scales.
        let mut rng = stream_rng(404, 0);
        let p = 9;
        let cov = CovarianceModel::wishart_jitter(p, 7, 0.0, &mut rng);
        let h = cov.rank();
        assert_eq!(h, 7);
        let n = 3;
        for &c in &[0.1, 1.0, 7.0] {
            let sol = minimize_variance_spectrum(
                &cov.eigenvalues().rows(0, h).into_owned(),
                n,
                h,
                c,
            )
            .unwrap();
            let mut weights = DVector::from_element(p, c);
            for i in 0..h {
                weights[i] = sol.weights[i];
            }
            let pen = Penalty::from_eigenbasis(cov.eigenvectors().clone(), weights).unwrap();
            let spec = asymptotics::whiten(&cov, &pen).unwrap();
            let report = asymptotics::risk_components(
                &spec,
                &pen,
                &DVector::zeros(p),
                1.0,
                n,
            )
            .unwrap();
            assert_relative_eq!(
                report.variance_factor.unwrap(),
                1.0 / (h as f64 / n as f64 - 1.0),
                epsilon = 1e-10
            );
            assert_relative_eq!(
                sol.value,
                report.variance_factor.unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn variance_minimizer_beats_random_penalties() {
        // Optimality without the aligned-basis restriction: random penalties
        // never undercut the optimum.
        let mut rng = stream_rng(405, 0);
        let p = 6;
        let cov = CovarianceModel::wishart_jitter(p, p, 0.05, &mut rng);
        let n = 2;
        let h = cov.rank();
        let optimum = 1.0 / (h as f64 / n as f64 - 1.0);
        for trial in 0..1000_u64 {
            let mut r = stream_rng(405, 1 + trial);
            let raw = standard_normal_matrix(p, p, &mut r);
            let basis = raw.qr().q();
            use rand::Rng;
            let weights = DVector::from_fn(p, |_, _| (r.random::<f64>() * 3.0 - 1.0).exp());
            let pen = Penalty::from_eigenbasis(basis, weights).unwrap();
            let spec = asymptotics::whiten(&cov, &pen).unwrap();
            let report =
                asymptotics::risk_components(&spec, &pen, &DVector::zeros(p), 1.0, n).unwrap();
            assert!(
                report.variance_factor.unwrap() >= optimum - 1e-10,
                "trial {trial}: variance factor beat the optimum"
            );
        }
    }

    #[test]
    fn soft_selection_worked_example() {
        // phi = [10, 1, 0.1] with eta = [1, 1, 1], n = 1, q = 1.
        let problem = diagonal_problem(
            &[1.0, 1.0, 1.0],
            &[10.0, 1.0, 0.1],
            1,
            1,
            1.0,
            1.0,
        );
        assert_eq!(problem.h1, 3);
        assert_eq!(problem.regime(), SelectionRegime::Soft);
        let sol = minimize_bias_spectrum(&problem, 1.0).unwrap();
        assert_eq!(sol.cutoff, Some(2));
        assert_relative_eq!(sol.value, 0.1 + 1.0 / 1.1, epsilon = 1e-12);
        assert_relative_eq!(sol.weights[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(sol.weights[1], 10.0, epsilon = 1e-12);
        assert!(sol.weights[2].is_infinite());
        assert_relative_eq!(sol.x[0], 1.0 / 11.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 10.0 / 11.0, epsilon = 1e-12);
        assert_relative_eq!(sol.x[2], 1.0, epsilon = 1e-15);
        assert!(is_feasible(&sol.x, 1, 1e-12));
        // The same optimum through the full pipeline.
        let pen = problem.realize_penalty(&sol.weights, 1.0).unwrap();
        let cov = CovarianceModel::identity(3);
        let spec = asymptotics::whiten(&cov, &pen).unwrap();
        let (avg_bias, _) = asymptotics::averaged_objective(
            &spec,
            &pen,
            &problem.bstar,
            &DMatrix::identity(1, 1),
            1.0,
            1,
        )
        .unwrap();
        assert_relative_eq!(avg_bias, sol.value, epsilon = 1e-9);
        // No feasible point does better (random search under the constraint).
        for trial in 0..10_000_u64 {
            let mut r = stream_rng(406, trial);
            use rand::Rng;
            let y = DVector::from_fn(3, |_, _| r.random::<f64>() * 2.0);
            let x = project_feasible(&y, 1);
            let value = averaged_bias_x(&x, &problem);
            assert!(
                value >= sol.value - 1e-9,
                "trial {trial}: feasible point beat the soft optimum"
            );
        }
    }

    #[test]
    fn hard_selection_bias_vanishes_along_scale_path() {
        // h1 = 2 aligned directions, n = 3 samples. The optimum keeps the
        // aligned directions with arbitrary positive weights and discards the
        // rest; its value zero is approached along a finite path where the
        // tail weights grow like eta_i / r (so the problem stays
        // sample-deficient) while r -> 0.
        let eta = [2.0, 1.0, 0.5, 0.25];
        let problem = diagonal_problem(&eta, &[5.0, 3.0, 0.0, 0.0], 3, 1, 1.0, 1.0);
        assert_eq!(problem.regime(), SelectionRegime::Hard);
        let sol = minimize_bias_spectrum(&problem, 1.0).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.weights[2].is_infinite() && sol.weights[3].is_infinite());
        let cov = CovarianceModel::from_matrix(DMatrix::from_diagonal(
            &DVector::from_column_slice(&eta),
        ))
        .unwrap();
        let mut previous = f64::INFINITY;
        for &r in &[1.0, 1e-2, 1e-4, 1e-6] {
            let mut weights = DVector::zeros(4);
            for i in 0..4 {
                weights[i] = if i < problem.h1 {
                    problem.eigenvalues[i]
                } else {
                    problem.eigenvalues[i] / r
                };
            }
            let pen = problem.realize_penalty(&weights, 1.0).unwrap();
            let spec = asymptotics::whiten(&cov, &pen).unwrap();
            let (avg_bias, _) = asymptotics::averaged_objective(
                &spec,
                &pen,
                &problem.bstar,
                &DMatrix::identity(1, 1),
                1.0,
                problem.n,
            )
            .unwrap();
            assert!(avg_bias < previous, "bias must shrink along r -> 0");
            previous = avg_bias;
        }
        assert!(previous <= 1e-8, "bias floor {previous}");
    }

    #[test]
    fn x_space_round_trip() {
        let eta = DVector::from_column_slice(&[3.0, 2.0, 1.0, 0.5]);
        let weights = DVector::from_column_slice(&[0.7, f64::INFINITY, 2.0, 0.1]);
        let c = 1.7;
        let x = to_x_space(&weights, &eta, c);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-15);
        let back = from_x_space(&x, &eta, c);
        for i in 0..4 {
            if weights[i].is_infinite() {
                assert!(back[i].is_infinite());
            } else {
                assert_relative_eq!(back[i], weights[i], epsilon = 1e-12, max_relative = 1e-12);
            }
        }
        // Proportional weights give x = 1/2 everywhere, feasible only when
        // h = 2n.
        let prop = to_x_space(&(2.0 * &eta), &eta, 2.0);
        for &v in prop.iter() {
            assert_relative_eq!(v, 0.5, epsilon = 1e-15);
        }
        assert!(is_feasible(&prop, 2, 1e-12));
        assert!(!is_feasible(&prop, 1, 1e-12));
    }

    #[test]
    fn projection_examples_and_optimality() {
        // Feasible points project to themselves.
        let y = DVector::from_column_slice(&[0.25, 0.75]);
        let x = project_feasible(&y, 1);
        assert!((x - &y).norm() < 1e-12);
        // Symmetric point.
        let x = project_feasible(&DVector::zeros(2), 1);
        assert_relative_eq!(x[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.5, epsilon = 1e-12);
        // Variational inequality against random feasible points.
        let mut rng = stream_rng(407, 0);
        let h = 7;
        let n = 3;
        let y = 2.0 * crate::rng::standard_normal_vector(h, &mut rng);
        let x = project_feasible(&y, n);
        assert!(is_feasible(&x, n, 1e-10));
        for trial in 0..1000_u64 {
            use rand::Rng;
            let mut r = stream_rng(407, 1 + trial);
            let z = project_feasible(&DVector::from_fn(h, |_, _| r.random::<f64>()), n);
            let inner = (&y - &x).dot(&(&z - &x));
            assert!(inner <= 1e-10, "trial {trial}: projection not optimal");
        }
    }

    #[test]
    fn relaxed_solution_reduces_to_variance_minimizer_without_signal() {
        // Zero alignment: the objective is sigma^2 V alone, minimized by the
        // uniform x.
        let problem = diagonal_problem(&[3.0, 2.0, 1.0], &[0.0, 0.0, 0.0], 1, 1, 4.0, 0.0);
        let sol = solve_relaxed(&problem, SpectrumObjective::Averaged).unwrap();
        let uniform = 1.0 - 1.0 / 3.0;
        for &v in sol.x.iter() {
            assert_relative_eq!(v, uniform, epsilon = 1e-6);
        }
        // Worst objective with zero radius behaves the same.
        let sol = solve_relaxed(&problem, SpectrumObjective::Worst).unwrap();
        for &v in sol.x.iter() {
            assert_relative_eq!(v, uniform, epsilon = 1e-6);
        }
        let direct = solve_direct(&problem, SpectrumObjective::Averaged, 4, 9).unwrap();
        for &v in direct.x.iter() {
            assert_relative_eq!(v, uniform, epsilon = 1e-6);
        }
    }

    #[test]
    fn direct_optimum_matches_grid_oracle() {
        // h = 3: the feasible set is a 2-simplex slice, fine grid over it.
        let problem = diagonal_problem(&[2.0, 1.2, 0.6], &[4.0, 1.5, 0.2], 1, 1, 1.0, 1.0);
        let direct = solve_direct(&problem, SpectrumObjective::Averaged, 10, 11).unwrap();
        let relaxed = solve_relaxed(&problem, SpectrumObjective::Averaged).unwrap();
        let mut grid_best = f64::INFINITY;
        let step = 0.005;
        let mut x1 = 0.0;
        while x1 <= 1.0 {
            let mut x2 = 0.0;
            while x2 <= 1.0 {
                let x3 = 2.0 - x1 - x2;
                if (0.0..=1.0).contains(&x3) {
                    let x = DVector::from_column_slice(&[x1, x2, x3]);
                    let v = objective_x(&x, &problem, SpectrumObjective::Averaged, false);
                    if v < grid_best {
                        grid_best = v;
                    }
                }
                x2 += step;
            }
            x1 += step;
        }
        assert!(
            direct.value <= grid_best + 1e-6,
            "direct {d} vs grid {grid_best}",
            d = direct.value
        );
        assert!(
            (direct.value - grid_best).abs() <= 1e-5 * (1.0 + grid_best.abs()),
            "direct {d} vs grid {grid_best}",
            d = direct.value
        );
        // The relaxation upper-bounds the exact optimum; the direct optimum
        // can only be at or below the exact value of the relaxed point.
        let relaxed_exact =
            objective_x(&relaxed.x, &problem, SpectrumObjective::Averaged, false);
        assert!(direct.value <= relaxed_exact + 1e-9);
        assert!(relaxed_exact <= relaxed.value + 1e-9);
    }

    #[test]
    fn midpoint_convexity_certificates() {
        let mut rng = stream_rng(408, 0);
        let p = 5;
        let cov = CovarianceModel::wishart_jitter(p, p, 0.1, &mut rng);
        let bstar = standard_normal_matrix(p, 2, &mut rng);
        let root = standard_normal_matrix(2, 2, &mut rng);
        let prior = &root * root.transpose();
        let problem = alignment_coefficients(&cov, &bstar, &prior, 2, 1.0, 1.3);
        let h = problem.h;
        for trial in 0..10_000_u64 {
            use rand::Rng;
            let mut r = stream_rng(408, 1 + trial);
            let a = project_feasible(&DVector::from_fn(h, |_, _| r.random::<f64>()), problem.n);
            let b = project_feasible(&DVector::from_fn(h, |_, _| r.random::<f64>()), problem.n);
            let mid = 0.5 * (&a + &b);
            let check = |f: &dyn Fn(&DVector<f64>) -> f64| {
                let lhs = f(&mid);
                let rhs = 0.5 * (f(&a) + f(&b));
                assert!(
                    lhs <= rhs + 1e-12,
                    "trial {trial}: midpoint convexity violated ({lhs} > {rhs})"
                );
            };
            check(&|x| variance_factor_x(x, problem.n));
            check(&|x| averaged_bias_x(x, &problem));
            check(&|x| worst_bias_x(x, &problem));
        }
    }

    #[test]
    fn soft_selection_weight_monotonicity() {
        // Within the kept block, growing one alignment never increases its
        // weight relative to the scale.
        let base_theta = [8.0, 3.0, 1.0, 0.4];
        let eta = [1.5, 1.2, 1.0, 0.8];
        let problem = diagonal_problem(&eta, &base_theta, 1, 1, 1.0, 1.0);
        let sol = minimize_bias_spectrum(&problem, 1.0).unwrap();
        let h0 = sol.cutoff.unwrap();
        for i in 0..h0 {
            let mut boosted = base_theta;
            boosted[i] *= 1.5;
            let boosted_problem = diagonal_problem(&eta, &boosted, 1, 1, 1.0, 1.0);
            let boosted_sol = minimize_bias_spectrum(&boosted_problem, 1.0).unwrap();
            // Find the boosted coordinate in the re-sorted order.
            let slot = boosted_problem
                .permutation
                .iter()
                .position(|&o| o == problem.permutation[i])
                .unwrap();
            if slot < boosted_sol.cutoff.unwrap() {
                assert!(
                    boosted_sol.weights[slot] <= sol.weights[i] + 1e-12,
                    "weight grew when alignment grew (direction {i})"
                );
            }
        }
    }

    #[test]
    fn scale_freedom_leaves_risk_quantities_unchanged() {
        let problem = diagonal_problem(&[2.0, 1.0, 0.5], &[3.0, 1.0, 0.2], 1, 1, 1.0, 1.0);
        let cov = CovarianceModel::from_matrix(DMatrix::from_diagonal(
            &DVector::from_column_slice(&[2.0, 1.0, 0.5]),
        ))
        .unwrap();
        let mut reports = Vec::new();
        for &c in &[0.3, 1.0, 4.5] {
            let sol = minimize_bias_spectrum(&problem, c).unwrap();
            let pen = problem.realize_penalty(&sol.weights, 1.0).unwrap();
            let spec = asymptotics::whiten(&cov, &pen).unwrap();
            let (avg_bias, avg_risk) = asymptotics::averaged_objective(
                &spec,
                &pen,
                &problem.bstar,
                &DMatrix::identity(1, 1),
                1.0,
                problem.n,
            )
            .unwrap();
            reports.push((avg_bias, avg_risk));
        }
        for window in reports.windows(2) {
            assert_relative_eq!(window[0].0, window[1].0, epsilon = 1e-10, max_relative = 1e-10);
            assert_relative_eq!(window[0].1, window[1].1, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn phase_flips_exactly_at_sample_count() {
        // Sweep h1 through n by zeroing alignments one at a time.
        let eta = [2.0, 1.6, 1.2, 0.9, 0.6];
        let n = 3;
        for h1 in 1..=5_usize {
            let mut theta = [0.0; 5];
            for (i, t) in theta.iter_mut().enumerate().take(h1) {
                *t = 2.0 - 0.3 * i as f64;
            }
            let problem = diagonal_problem(&eta, &theta, n, 1, 1.0, 1.0);
            assert_eq!(problem.h1, h1);
            let expected = if h1 <= n {
                SelectionRegime::Hard
            } else {
                SelectionRegime::Soft
            };
            assert_eq!(problem.regime(), expected, "h1 = {h1}");
        }
    }
}
