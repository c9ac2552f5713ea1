//! Exact asymptotic risk and its fine-grained components.
//!
//! Whitening by the penalty reduces the featurized problem to plain ridgeless
//! regression with covariance `G Sigma G`, `G = Gamma^{-1/2}`. Everything
//! then flows from the nonzero whitened spectrum `{t_i}` and the unique
//! non-negative root `b0` of the self-consistent equation
//!
//! ```text
//! 1 - n / h = (1/h) sum_i 1 / (1 + t_i b0)        (n < h)
//! ```
//!
//! In the sample-deficient regime the risk is `B (1 + V) + sigma^2 V` where
//! `V` and `B` are the spectral sums below; in the sample-rich regime the
//! risk collapses to `sigma^2 h / (n - h)` independent of the penalty.
//!
//! Penalties may discard directions outright (infinite weights). Each
//! discarded direction must be an eigendirection of `Sigma`; it then leaves
//! the whitened spectrum and instead contributes its full signal energy
//! `eta_j <u_j, beta>^2` to the bias, which is the exact limit of the finite
//! formulas as the weight grows. With discarded directions the effective
//! dimension shrinks, so a nominally sample-deficient problem can become
//! sample-rich; the sample-rich branch then carries the residual bias and the
//! discarded signal acts as extra label noise.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::CovarianceModel;
use crate::penalty::Penalty;

/// Relative tolerance that decides which whitened eigenvalues count as
/// nonzero when no structural count is available.
pub const SUPPORT_TOLERANCE: f64 = 1e-10;

/// Relative residual tolerance of the fixed-point solve: the solver stops at
/// `|residual| <= 1e-12 * h`.
pub const FIXED_POINT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    SampleDeficient,
    SampleRich,
}

/// Eigensystem of the whitened covariance `Gamma^{-1/2} Sigma Gamma^{-1/2}`.
///
/// Eigenvalues are sorted descending; the first `support` of them are the
/// nonzero spectrum. Directions the penalty discarded entirely are tracked
/// separately with their covariance eigenvalues.
#[derive(Debug, Clone)]
pub struct WhitenedSpectrum {
    eigenvalues: DVector<f64>,
    basis: DMatrix<f64>,
    support: usize,
    discarded_dirs: DMatrix<f64>,
    discarded_etas: DVector<f64>,
}

impl WhitenedSpectrum {
    pub fn p(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Number of nonzero whitened eigenvalues (the effective dimension `h`).
    pub fn support(&self) -> usize {
        self.support
    }

    /// All `p` eigenvalues, descending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Eigenvectors as columns, ordered like the eigenvalues.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn t_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn t_min_positive(&self) -> f64 {
        self.eigenvalues[self.support - 1]
    }

    /// Directions removed by infinite penalty weights (columns), together
    /// with their covariance eigenvalues.
    pub fn discarded(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.discarded_dirs, &self.discarded_etas)
    }

    pub fn regime(&self, n: usize) -> Result<Regime> {
        if n < self.support {
            Ok(Regime::SampleDeficient)
        } else if n > self.support {
            Ok(Regime::SampleRich)
        } else {
            Err(Error::Boundary { n })
        }
    }
}

/// Whitens the covariance by the penalty. Fails if the penalty discards a
/// direction that is not an eigendirection of the covariance: the exact
/// discarded-bias correction below is only valid when the kept and discarded
/// subspaces are uncorrelated under `Sigma`.
pub fn whiten(covariance: &CovarianceModel, penalty: &Penalty) -> Result<WhitenedSpectrum> {
    if covariance.dim() != penalty.p() {
        return Err(Error::DimensionMismatch(alloc::format!(
            "covariance dim {} vs penalty dim {}",
            covariance.dim(),
            penalty.p()
        )));
    }
    let g = penalty.gamma_inv_sqrt();
    let whitened = &g * covariance.matrix() * &g;
    let (values, vectors) = linalg::sym_eig_desc(&whitened);

    let mut discarded_cols: Vec<usize> = Vec::new();
    for (j, &w) in penalty.weights().iter().enumerate() {
        if w.is_infinite() {
            discarded_cols.push(j);
        }
    }
    let p = covariance.dim();
    let mut discarded_dirs = DMatrix::zeros(p, discarded_cols.len());
    let mut discarded_etas = DVector::zeros(discarded_cols.len());
    let mut discarded_ranked = 0;
    let rank_floor = crate::model::RANK_TOLERANCE * covariance.top_eigenvalue();
    for (slot, &j) in discarded_cols.iter().enumerate() {
        let u = penalty.basis().column(j).into_owned();
        let sigma_u = covariance.matrix() * &u;
        let eta = u.dot(&sigma_u);
        let off_axis = (&sigma_u - eta * &u).norm();
        if off_axis > 1e-8 * covariance.top_eigenvalue().max(1e-300) {
            return Err(Error::InvalidArgument(alloc::format!(
                "discarded direction {j} is not an eigendirection of the covariance \
                 (off-axis component {off_axis:e}); the discarded-bias correction \
                 would be inexact"
            )));
        }
        if eta > rank_floor {
            discarded_ranked += 1;
        }
        discarded_dirs.set_column(slot, &u);
        discarded_etas[slot] = eta;
    }

    // Structural support: with finite weights the whitened rank equals the
    // covariance rank exactly, however tiny the smallest eigenvalue comes
    // out, so extreme finite weights do not silently drop out of the
    // spectrum. Each discarded direction with positive covariance eigenvalue
    // removes one dimension.
    let structural = covariance.rank() - discarded_ranked;
    let positive = values.iter().filter(|&&t| t > 0.0).count();
    let support = structural.min(positive);

    Ok(WhitenedSpectrum {
        eigenvalues: values.map(|v| v.max(0.0)),
        basis: vectors,
        support,
        discarded_dirs,
        discarded_etas,
    })
}

/// Solution of the self-consistent equation with solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub value: f64,
    /// `|sum_i 1/(1 + t_i b0) - (h - n)|` at the returned root.
    pub residual: f64,
    /// Provable bracket `n / ((h-n) t_max) <= b0 <= n / ((h-n) t_min^+)`.
    pub lower: f64,
    pub upper: f64,
    pub iterations: usize,
}

/// Solves the fixed point on the nonzero whitened spectrum. Requires the
/// sample-deficient regime `n < h`; the map is strictly decreasing and convex
/// in `b0`, so a bracketed Newton iteration converges monotonically from the
/// lower end. Convergence is judged on the residual, never the step size.
pub fn solve_b0(spectrum: &WhitenedSpectrum, n: usize) -> Result<FixedPoint> {
    let h = spectrum.support();
    match spectrum.regime(n)? {
        Regime::SampleRich => return Err(Error::SampleRich { n, h }),
        Regime::SampleDeficient => {}
    }
    let t = &spectrum.eigenvalues().as_slice()[..h];
    solve_b0_from_eigenvalues(t, n)
}

/// Fixed-point solver on a raw positive spectrum (descending or not).
pub fn solve_b0_from_eigenvalues(t: &[f64], n: usize) -> Result<FixedPoint> {
    let h = t.len();
    if n >= h {
        return Err(Error::SampleRich { n, h });
    }
    let t_max = t.iter().cloned().fold(f64::MIN, f64::max);
    let t_min = t.iter().cloned().fold(f64::MAX, f64::min);
    let deficit = (h - n) as f64;
    let lower = n as f64 / (deficit * t_max);
    let upper = n as f64 / (deficit * t_min);

    let residual_at = |b: f64| -> f64 {
        let terms: Vec<f64> = t.iter().map(|&ti| 1.0 / (1.0 + ti * b)).collect();
        linalg::pairwise_sum(&terms) - deficit
    };
    let slope_at = |b: f64| -> f64 {
        let terms: Vec<f64> = t
            .iter()
            .map(|&ti| {
                let denom = 1.0 + ti * b;
                -ti / (denom * denom)
            })
            .collect();
        linalg::pairwise_sum(&terms)
    };

    let tolerance = FIXED_POINT_TOLERANCE * h as f64;
    let mut lo = lower;
    let mut hi = upper;
    let mut b = lower;
    let mut residual = residual_at(b);
    let mut iterations = 0;
    while residual.abs() > tolerance && iterations < 100 {
        iterations += 1;
        // Maintain the bracket: residual is decreasing in b.
        if residual > 0.0 {
            lo = lo.max(b);
        } else {
            hi = hi.min(b);
        }
        let slope = slope_at(b);
        let newton = b - residual / slope;
        b = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        residual = residual_at(b);
    }
    if residual.abs() > tolerance {
        // Newton stalled; finish with plain bisection on the bracket.
        for _ in 0..200 {
            if residual.abs() <= tolerance {
                break;
            }
            if residual > 0.0 {
                lo = b;
            } else {
                hi = b;
            }
            b = 0.5 * (lo + hi);
            residual = residual_at(b);
            iterations += 1;
        }
    }
    Ok(FixedPoint {
        value: b,
        residual: residual.abs(),
        lower,
        upper,
        iterations,
    })
}

/// Asymptotic risk report. In the sample-deficient regime all components are
/// spectral sums; in the sample-rich regime the only variance left is the
/// noise-by-data interaction, plus whatever bias the discarded directions
/// carry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticReport {
    pub regime: Regime,
    /// Variance factor `V` (sample-deficient only).
    pub variance_factor: Option<f64>,
    /// Bias `B`, including the energy of discarded directions.
    pub bias: f64,
    /// Total risk.
    pub risk: f64,
    /// Fine-grained limits: bias, data variance, data-noise interaction,
    /// pure noise variance (always zero in the limit).
    pub fg_bias: f64,
    pub fg_variance_x: f64,
    pub fg_variance_xe: f64,
    pub fg_variance_e: f64,
}

fn variance_factor_from_x(x: &[f64], n: usize, h: usize) -> f64 {
    let x_sq: Vec<f64> = x.iter().map(|&v| v * v).collect();
    let s2 = linalg::pairwise_sum(&x_sq);
    (2.0 * n as f64 - h as f64 + s2) / (h as f64 - n as f64 - s2)
}

/// Signal energy on the discarded directions: `sum_j eta_j <u_j, beta>^2`.
fn discarded_bias(spectrum: &WhitenedSpectrum, beta_star: &DVector<f64>) -> f64 {
    let (dirs, etas) = spectrum.discarded();
    let mut total = 0.0;
    for j in 0..etas.len() {
        let overlap = dirs.column(j).dot(beta_star);
        total += etas[j] * overlap * overlap;
    }
    total
}

/// Exact asymptotic risk and its fine-grained decomposition for a fixed task.
pub fn risk_components(
    spectrum: &WhitenedSpectrum,
    penalty: &Penalty,
    beta_star: &DVector<f64>,
    sigma2: f64,
    n: usize,
) -> Result<AsymptoticReport> {
    let h = spectrum.support();
    let residual_bias = discarded_bias(spectrum, beta_star);
    match spectrum.regime(n)? {
        Regime::SampleRich => {
            // The discarded signal behaves as independent extra label noise
            // for the kept problem, and its energy is pure bias.
            let effective_noise = sigma2 + residual_bias;
            let interaction = effective_noise * h as f64 / (n as f64 - h as f64);
            Ok(AsymptoticReport {
                regime: Regime::SampleRich,
                variance_factor: None,
                bias: residual_bias,
                risk: residual_bias + interaction,
                fg_bias: residual_bias,
                fg_variance_x: 0.0,
                fg_variance_xe: interaction,
                fg_variance_e: 0.0,
            })
        }
        Regime::SampleDeficient => {
            let b0 = solve_b0(spectrum, n)?.value;
            let t = &spectrum.eigenvalues().as_slice()[..h];
            let x: Vec<f64> = t.iter().map(|&ti| 1.0 / (1.0 + ti * b0)).collect();
            let variance_factor = variance_factor_from_x(&x, n, h);

            let sqrt_pen = penalty.gamma_sqrt_finite();
            let weighted_signal = &sqrt_pen * beta_star;
            let terms: Vec<f64> = (0..h)
                .map(|i| {
                    let overlap = spectrum.basis().column(i).dot(&weighted_signal);
                    t[i] * overlap * overlap * x[i] * x[i]
                })
                .collect();
            let bias = linalg::pairwise_sum(&terms) + residual_bias;
            let risk = bias * (1.0 + variance_factor) + sigma2 * variance_factor;
            Ok(AsymptoticReport {
                regime: Regime::SampleDeficient,
                variance_factor: Some(variance_factor),
                bias,
                risk,
                fg_bias: bias,
                fg_variance_x: variance_factor * bias,
                fg_variance_xe: sigma2 * variance_factor,
                fg_variance_e: 0.0,
            })
        }
    }
}

/// Sample-rich limiting risk `sigma^2 h / (n - h)`.
pub fn sample_rich_risk(sigma2: f64, h: usize, n: usize) -> f64 {
    sigma2 * h as f64 / (n as f64 - h as f64)
}

/// Prior-averaged bias and risk `(B_avg, R_avg)` for a task ensemble with
/// scaled prior covariance `prior` (a `q x q` PSD matrix; the task drawn is
/// `alpha = q^{-1/2} prior^{1/2} xi`).
pub fn averaged_objective(
    spectrum: &WhitenedSpectrum,
    penalty: &Penalty,
    bstar: &DMatrix<f64>,
    prior: &DMatrix<f64>,
    sigma2: f64,
    n: usize,
) -> Result<(f64, f64)> {
    let h = spectrum.support();
    match spectrum.regime(n)? {
        Regime::SampleRich => Err(Error::SampleRich { n, h }),
        Regime::SampleDeficient => {
            let q = bstar.ncols();
            let b0 = solve_b0(spectrum, n)?.value;
            let t = &spectrum.eigenvalues().as_slice()[..h];

            let sqrt_pen = penalty.gamma_sqrt_finite();
            // z_i = B^T Gamma^{1/2} w_i; the bias term is q^{-1} z_i^T prior z_i.
            let lifted = bstar.transpose() * &sqrt_pen; // q x p
            let terms: Vec<f64> = (0..h)
                .map(|i| {
                    let x = 1.0 / (1.0 + t[i] * b0);
                    let z = &lifted * spectrum.basis().column(i);
                    t[i] * x * x * (prior * &z).dot(&z)
                })
                .collect();
            let mut avg_bias = linalg::pairwise_sum(&terms) / q as f64;

            // Discarded directions keep their full prior-weighted energy.
            let (dirs, etas) = spectrum.discarded();
            for j in 0..etas.len() {
                let z = bstar.transpose() * dirs.column(j);
                avg_bias += etas[j] * (prior * &z).dot(&z) / q as f64;
            }

            let x: Vec<f64> = t.iter().map(|&ti| 1.0 / (1.0 + ti * b0)).collect();
            let variance_factor = variance_factor_from_x(&x, n, h);
            let avg_risk = avg_bias * (1.0 + variance_factor) + sigma2 * variance_factor;
            Ok((avg_bias, avg_risk))
        }
    }
}

/// Worst-case bias and risk `(B_worst, R_worst)` over tasks in the ball
/// `||alpha||^2 <= radius`: the bias maximum is `radius` times the top
/// eigenvalue of the `q x q` spectral moment matrix.
pub fn worst_case_objective(
    spectrum: &WhitenedSpectrum,
    penalty: &Penalty,
    bstar: &DMatrix<f64>,
    sigma2: f64,
    n: usize,
    radius: f64,
) -> Result<(f64, f64)> {
    let (moment, variance_factor) = worst_case_moment(spectrum, penalty, bstar, n)?;
    let (values, _) = linalg::sym_eig_desc(&moment);
    let worst_bias = radius * values[0];
    let worst_risk = sigma2 * variance_factor + (variance_factor + 1.0) * worst_bias;
    Ok((worst_bias, worst_risk))
}

/// The moment matrix whose top eigenvalue gives the worst-case bias, plus the
/// variance factor. Shared by the closed form and its gradient.
pub fn worst_case_moment(
    spectrum: &WhitenedSpectrum,
    penalty: &Penalty,
    bstar: &DMatrix<f64>,
    n: usize,
) -> Result<(DMatrix<f64>, f64)> {
    let h = spectrum.support();
    match spectrum.regime(n)? {
        Regime::SampleRich => Err(Error::SampleRich { n, h }),
        Regime::SampleDeficient => {
            let q = bstar.ncols();
            let b0 = solve_b0(spectrum, n)?.value;
            let t = &spectrum.eigenvalues().as_slice()[..h];
            let sqrt_pen = penalty.gamma_sqrt_finite();
            let lifted = bstar.transpose() * &sqrt_pen; // q x p
            let mut moment = DMatrix::zeros(q, q);
            #[allow(clippy::needless_range_loop)]
            for i in 0..h {
                let x = 1.0 / (1.0 + t[i] * b0);
                let z = &lifted * spectrum.basis().column(i);
                moment += t[i] * x * x * &z * z.transpose();
            }
            let (dirs, etas) = spectrum.discarded();
            for j in 0..etas.len() {
                let z = bstar.transpose() * dirs.column(j);
                moment += etas[j] * &z * z.transpose();
            }
            let x: Vec<f64> = t.iter().map(|&ti| 1.0 / (1.0 + ti * b0)).collect();
            let variance_factor = variance_factor_from_x(&x, n, h);
            Ok((moment, variance_factor))
        }
    }
}
