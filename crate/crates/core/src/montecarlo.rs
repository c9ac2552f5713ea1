//! Monte Carlo estimators for the risk and both bias-variance
//! decompositions.
//!
//! Label noise enters the fitted coefficients linearly, `beta(X, eps) =
//! m(X) + A(X) eps`, so every expectation over the noise is integrated
//! analytically: only the data matrix is sampled. This drops the noise
//! dimension from the estimator variance entirely. Per replicate `j`:
//!
//! - `m_j = E_eps beta` is the noiseless fit,
//! - `A_j` maps noise to coefficients,
//! - semi-classical components: `bias_j = (beta* - m_j)^T Sigma (beta* - m_j)`,
//!   `variance_j = sigma^2 tr(A_j^T Sigma A_j)`.
//!
//! The fine-grained estimators split the replicate mean further:
//! bias against the mean fit, data variance of the mean fits, mean noise
//! variance, and their interaction; the four telescope to the mean risk
//! exactly, by construction. Standard errors are replicate-level jackknives.
//!
//! Replicate `j` draws from stream `stream_base + j`, so estimates are
//! identical no matter how replicates are scheduled; [`combine_replicates`]
//! reduces any pre-computed replicate set in index order with pairwise sums.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::asymptotics::{self, AsymptoticReport, WhitenedSpectrum};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{sample_data, CovarianceModel};
use crate::penalty::Penalty;
use crate::predictor::PINV_CUTOFF;
use crate::rng;

/// Closed-in-noise statistics of one data draw.
#[derive(Debug, Clone)]
pub struct Replicate {
    /// Noiseless fit `m = E_eps beta`.
    pub mean_fit: DVector<f64>,
    /// Noise-to-coefficient map `A` (p x n).
    pub noise_map: DMatrix<f64>,
    /// `(beta* - m)^T Sigma (beta* - m)`.
    pub sc_bias: f64,
    /// `tr(A^T Sigma A)` (multiply by `sigma^2` for the SC variance).
    pub noise_trace: f64,
}

/// Semi-classical decomposition of one design matrix, no noise sampled.
pub fn sc_decomposition(
    x: &DMatrix<f64>,
    penalty: &Penalty,
    beta_star: &DVector<f64>,
    covariance: &CovarianceModel,
    sigma2: f64,
) -> (f64, f64) {
    let rep = replicate_stats(x, penalty, beta_star, covariance);
    (rep.sc_bias, sigma2 * rep.noise_trace)
}

/// Computes the replicate statistics for a given design matrix.
pub fn replicate_stats(
    x: &DMatrix<f64>,
    penalty: &Penalty,
    beta_star: &DVector<f64>,
    covariance: &CovarianceModel,
) -> Replicate {
    let g = penalty.gamma_inv_sqrt();
    let whitened = x * &g; // n x p
    let gram = whitened.transpose() * &whitened; // p x p
    let (values, vectors) = linalg::sym_eig_desc(&gram);
    let (pinv, _) = linalg::pinv_psd(&values, &vectors, PINV_CUTOFF);
    // A = G (G X^T X G)^+ G X^T maps noise to coefficients; m = A X beta*.
    let noise_map = &g * &pinv * &g * x.transpose();
    let mean_fit = &noise_map * (x * beta_star);
    let delta = beta_star - &mean_fit;
    let sc_bias = (covariance.matrix() * &delta).dot(&delta);
    let weighted = covariance.sqrt() * &noise_map;
    let noise_trace = weighted.norm_squared();
    Replicate {
        mean_fit,
        noise_map,
        sc_bias,
        noise_trace,
    }
}

/// Draws one replicate: stream `stream_base + index` generates the design.
pub fn sample_replicate(
    covariance: &CovarianceModel,
    penalty: &Penalty,
    beta_star: &DVector<f64>,
    n: usize,
    seed: u64,
    stream_base: u64,
    index: u64,
) -> Replicate {
    let mut rng = rng::stream_rng(seed, stream_base + index);
    // The noise itself is integrated analytically; only X matters.
    let data = sample_data(covariance, beta_star, 0.0, n, &mut rng);
    replicate_stats(&data.x, penalty, beta_star, covariance)
}

/// Monte Carlo estimate of the risk and its decompositions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionEstimate {
    pub replicates: usize,
    /// Mean risk (noise integrated analytically) and its standard error.
    pub mean_risk: f64,
    pub mean_risk_se: f64,
    /// Replicate means of the semi-classical components.
    pub sc_bias: f64,
    pub sc_variance: f64,
    /// Fine-grained components with jackknife standard errors.
    pub fg_bias: f64,
    pub fg_bias_se: f64,
    pub fg_variance_x: f64,
    pub fg_variance_x_se: f64,
    pub fg_variance_e: f64,
    pub fg_variance_e_se: f64,
    pub fg_variance_xe: f64,
    pub fg_variance_xe_se: f64,
}

/// Reduces replicates (in index order) to the decomposition estimate.
pub fn combine_replicates(
    replicates: &[Replicate],
    beta_star: &DVector<f64>,
    covariance: &CovarianceModel,
    sigma2: f64,
) -> DecompositionEstimate {
    let count = replicates.len();
    let nf = count as f64;
    let p = beta_star.len();
    let n = replicates[0].noise_map.ncols();

    // Mean fit and mean noise map.
    let mut mean_fit = DVector::zeros(p);
    for r in replicates {
        mean_fit += &r.mean_fit;
    }
    mean_fit /= nf;
    let mut mean_map = DMatrix::zeros(p, n);
    for r in replicates {
        mean_map += &r.noise_map;
    }
    mean_map /= nf;

    // Fine-grained components.
    let delta = beta_star - &mean_fit;
    let fg_bias = (covariance.matrix() * &delta).dot(&delta);
    let spreads: Vec<f64> = replicates
        .iter()
        .map(|r| {
            let d = &r.mean_fit - &mean_fit;
            (covariance.matrix() * &d).dot(&d)
        })
        .collect();
    let fg_variance_x = linalg::pairwise_sum(&spreads) / nf;
    let mean_weighted = covariance.sqrt() * &mean_map;
    let traces: Vec<f64> = replicates.iter().map(|r| r.noise_trace).collect();
    let trace_sum = linalg::pairwise_sum(&traces);
    let mean_trace = trace_sum / nf;
    // The squared norm of the mean map overstates its target (zero) by the
    // sampling variance over N; subtract the unbiased correction so the
    // estimate can sit at its noise floor (possibly slightly negative). The
    // correction moves into the interaction term, keeping the telescoping
    // identity exact.
    let mean_map_energy = mean_weighted.norm_squared();
    let map_energy_correction = (trace_sum - nf * mean_map_energy) / (nf * (nf - 1.0));
    let fg_variance_e = sigma2 * (mean_map_energy - map_energy_correction);
    let fg_variance_xe = sigma2 * mean_trace - fg_variance_e;

    // The four components telescope to the replicate-mean risk exactly.
    let mean_risk = fg_bias + fg_variance_x + fg_variance_e + fg_variance_xe;
    let risks: Vec<f64> = replicates
        .iter()
        .map(|r| r.sc_bias + sigma2 * r.noise_trace)
        .collect();
    let (_, mean_risk_se) = linalg::mean_se(&risks);

    let sc_biases: Vec<f64> = replicates.iter().map(|r| r.sc_bias).collect();
    let sc_bias = linalg::pairwise_sum(&sc_biases) / nf;
    let sc_variance = sigma2 * mean_trace;

    // Jackknife standard errors. Every leave-one-out value is exact through
    // cached inner products: with m' = (N m_bar - m_j) / (N - 1) and
    // A' = (N A_bar - A_j) / (N - 1), the quadratic forms expand in the
    // per-replicate energies and cross terms below.
    let sigma_fits: Vec<DVector<f64>> = replicates
        .iter()
        .map(|r| covariance.matrix() * &r.mean_fit)
        .collect();
    let fit_energy: Vec<f64> = replicates
        .iter()
        .zip(&sigma_fits)
        .map(|(r, s)| s.dot(&r.mean_fit))
        .collect();
    let signal_cross: Vec<f64> = sigma_fits.iter().map(|s| s.dot(beta_star)).collect();
    let signal_energy = (covariance.matrix() * beta_star).dot(beta_star);
    let sigma_mean = covariance.matrix() * &mean_fit;
    let mean_cross: Vec<f64> = replicates.iter().map(|r| sigma_mean.dot(&r.mean_fit)).collect();
    let mean_energy = sigma_mean.dot(&mean_fit);
    let map_cross: Vec<f64> = replicates
        .iter()
        .map(|r| mean_weighted.dot(&(covariance.sqrt() * &r.noise_map)))
        .collect();

    let mut loo_bias = Vec::with_capacity(count);
    let mut loo_var_x = Vec::with_capacity(count);
    let mut loo_var_e = Vec::with_capacity(count);
    let mut loo_var_xe = Vec::with_capacity(count);
    let nf1 = nf - 1.0;
    let energy_total = linalg::pairwise_sum(&fit_energy);
    let cross_total = linalg::pairwise_sum(&signal_cross);
    for j in 0..count {
        let loo_mean_energy =
            (nf * nf * mean_energy - 2.0 * nf * mean_cross[j] + fit_energy[j]) / (nf1 * nf1);
        let loo_signal_cross = (cross_total - signal_cross[j]) / nf1;
        loo_bias.push(signal_energy - 2.0 * loo_signal_cross + loo_mean_energy);
        let loo_energy_mean = (energy_total - fit_energy[j]) / nf1;
        loo_var_x.push(loo_energy_mean - loo_mean_energy);
        let loo_map_energy =
            (nf * nf * mean_map_energy - 2.0 * nf * map_cross[j] + traces[j]) / (nf1 * nf1);
        let loo_trace = (trace_sum - traces[j]) / nf1;
        let loo_correction =
            ((trace_sum - traces[j]) - nf1 * loo_map_energy) / (nf1 * (nf1 - 1.0));
        let ve = sigma2 * (loo_map_energy - loo_correction);
        loo_var_e.push(ve);
        loo_var_xe.push(sigma2 * loo_trace - ve);
    }

    DecompositionEstimate {
        replicates: count,
        mean_risk,
        mean_risk_se,
        sc_bias,
        sc_variance,
        fg_bias,
        fg_bias_se: linalg::jackknife_se(&loo_bias),
        fg_variance_x,
        fg_variance_x_se: linalg::jackknife_se(&loo_var_x),
        fg_variance_e,
        fg_variance_e_se: linalg::jackknife_se(&loo_var_e),
        fg_variance_xe,
        fg_variance_xe_se: linalg::jackknife_se(&loo_var_xe),
    }
}

/// Serial convenience wrapper: samples `n_replicates` designs and combines
/// them. Parallel drivers should map [`sample_replicate`] over indices and
/// call [`combine_replicates`] on the ordered results.
#[allow(clippy::too_many_arguments)]
pub fn fg_estimates(
    covariance: &CovarianceModel,
    penalty: &Penalty,
    beta_star: &DVector<f64>,
    sigma2: f64,
    n: usize,
    n_replicates: usize,
    seed: u64,
    stream_base: u64,
) -> Result<DecompositionEstimate> {
    if n_replicates < 2 {
        return Err(Error::InvalidArgument(
            "at least two replicates are required".into(),
        ));
    }
    let replicates: Vec<Replicate> = (0..n_replicates)
        .map(|j| sample_replicate(covariance, penalty, beta_star, n, seed, stream_base, j as u64))
        .collect();
    Ok(combine_replicates(&replicates, beta_star, covariance, sigma2))
}

/// One row of a risk curve: the Monte Carlo estimate joined with the exact
/// asymptotic report at the same sample count.
#[derive(Debug, Clone)]
pub struct RiskCurvePoint {
    pub n: usize,
    pub estimate: Option<DecompositionEstimate>,
    pub report: Option<AsymptoticReport>,
    /// `"ok"` or the error rendered as text (boundary rows never abort).
    pub status: alloc::string::String,
}

/// Monte Carlo + asymptotics across a grid of sample counts.
#[allow(clippy::too_many_arguments)]
pub fn risk_curve(
    covariance: &CovarianceModel,
    penalty: &Penalty,
    spectrum: &WhitenedSpectrum,
    beta_star: &DVector<f64>,
    sigma2: f64,
    n_grid: &[usize],
    n_replicates: usize,
    seed: u64,
) -> Vec<RiskCurvePoint> {
    n_grid
        .iter()
        .enumerate()
        .map(|(idx, &n)| {
            let stream_base = (idx as u64) << 32;
            let estimate = fg_estimates(
                covariance,
                penalty,
                beta_star,
                sigma2,
                n,
                n_replicates,
                seed,
                stream_base,
            )
            .ok();
            match asymptotics::risk_components(spectrum, penalty, beta_star, sigma2, n) {
                Ok(report) => RiskCurvePoint {
                    n,
                    estimate,
                    report: Some(report),
                    status: "ok".into(),
                },
                Err(err) => RiskCurvePoint {
                    n,
                    estimate,
                    report: None,
                    status: alloc::format!("{err}"),
                },
            }
        })
        .collect()
}
