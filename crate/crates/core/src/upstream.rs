//! Upstream stage: per-task least-squares estimation of the ground-truth
//! representation, and the sample-complexity experiment that tracks how the
//! estimation error propagates into the averaged downstream objective.
//!
//! Each source task is estimated by ordinary least squares from its own
//! pretraining data (or from one shared design matrix, the default). The
//! scaling experiment sweeps the pretraining sample count and fits the
//! log-log slope of `|R_avg(estimated) - R_avg(true)|`, which decays like
//! `n_pre^{-1/2}`.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::asymptotics::{averaged_objective, WhitenedSpectrum};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::CovarianceModel;
use crate::penalty::Penalty;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpstreamConfig {
    /// Pretraining samples per task; must exceed the dimension.
    pub samples_per_task: usize,
    /// Pretraining label-noise variance.
    pub noise_variance: f64,
    /// One design matrix shared by all tasks (default) or an independent
    /// draw per task.
    pub shared_design: bool,
}

impl UpstreamConfig {
    pub fn new(samples_per_task: usize, noise_variance: f64) -> Self {
        Self {
            samples_per_task,
            noise_variance,
            shared_design: true,
        }
    }
}

/// Pretraining data: one design per task (aliased when shared) and the
/// per-task responses.
#[derive(Debug, Clone)]
pub struct UpstreamData {
    pub designs: Vec<DMatrix<f64>>,
    pub responses: Vec<DVector<f64>>,
    pub shared_design: bool,
}

/// Per-task OLS estimate of the representation.
#[derive(Debug, Clone)]
pub struct RepresentationEstimate {
    pub matrix: DMatrix<f64>,
    /// Residual norm `||X b - y||` per task.
    pub residual_norms: Vec<f64>,
}

/// Samples the upstream datasets `y_i = X_i b_i + eps_i`.
pub fn generate_upstream(
    covariance: &CovarianceModel,
    bstar: &DMatrix<f64>,
    config: &UpstreamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpstreamData> {
    let p = covariance.dim();
    let q = bstar.ncols();
    let n_pre = config.samples_per_task;
    if n_pre <= p {
        return Err(Error::UnderdeterminedUpstream { n_pre, p });
    }
    let draw_design = |rng: &mut ChaCha8Rng| -> DMatrix<f64> {
        rng::standard_normal_matrix(n_pre, p, rng) * covariance.sqrt()
    };
    let mut designs = Vec::with_capacity(q);
    let mut responses = Vec::with_capacity(q);
    if config.shared_design {
        let shared = draw_design(rng);
        for task in 0..q {
            let noise =
                config.noise_variance.sqrt() * rng::standard_normal_vector(n_pre, rng);
            responses.push(&shared * bstar.column(task) + noise);
            let _ = task;
        }
        designs.push(shared);
    } else {
        for task in 0..q {
            let design = draw_design(rng);
            let noise =
                config.noise_variance.sqrt() * rng::standard_normal_vector(n_pre, rng);
            responses.push(&design * bstar.column(task) + noise);
            designs.push(design);
        }
    }
    Ok(UpstreamData {
        designs,
        responses,
        shared_design: config.shared_design,
    })
}

/// Ordinary least squares per task.
pub fn estimate_representation(data: &UpstreamData) -> Result<RepresentationEstimate> {
    let q = data.responses.len();
    let p = data.designs[0].ncols();
    let mut matrix = DMatrix::zeros(p, q);
    let mut residual_norms = Vec::with_capacity(q);

    // Factor each distinct design once.
    let mut factors: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::new();
    for design in &data.designs {
        let normal = design.transpose() * design;
        let (values, vectors) = linalg::sym_eig_desc(&normal);
        let smallest = values[values.len() - 1];
        if smallest <= 1e-12 * values[0].max(1e-300) {
            return Err(Error::SingularDesign { smallest });
        }
        factors.push((values, vectors));
    }

    for task in 0..q {
        let design = if data.shared_design {
            &data.designs[0]
        } else {
            &data.designs[task]
        };
        let (values, vectors) = if data.shared_design {
            &factors[0]
        } else {
            &factors[task]
        };
        let rhs = design.transpose() * &data.responses[task];
        let projected = vectors.transpose() * rhs;
        let scaled = DVector::from_iterator(
            values.len(),
            projected.iter().zip(values.iter()).map(|(&c, &v)| c / v),
        );
        let coeff = vectors * scaled;
        residual_norms.push((design * &coeff - &data.responses[task]).norm());
        matrix.set_column(task, &coeff);
    }
    Ok(RepresentationEstimate {
        matrix,
        residual_norms,
    })
}

/// One row of the scaling experiment.
#[derive(Debug, Clone)]
pub struct ScalingRow {
    pub n_pre: usize,
    /// `|R_avg(estimated) - R_avg(true)|` per seed.
    pub errors: Vec<f64>,
    pub mean_error: f64,
    pub se: f64,
}

/// Sweeps the pretraining sample count, re-estimates the representation per
/// seed, and measures the error of the averaged objective. Returns the rows
/// and the fitted log-log slope of the mean error.
#[allow(clippy::too_many_arguments)]
pub fn scaling_experiment(
    covariance: &CovarianceModel,
    bstar: &DMatrix<f64>,
    prior: &DMatrix<f64>,
    penalty: &Penalty,
    spectrum: &WhitenedSpectrum,
    sigma2: f64,
    n: usize,
    grid: &[usize],
    upstream_noise: f64,
    seeds: u64,
    seed: u64,
) -> Result<(Vec<ScalingRow>, f64)> {
    let (_, reference) = averaged_objective(spectrum, penalty, bstar, prior, sigma2, n)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (idx, &n_pre) in grid.iter().enumerate() {
        let mut errors = Vec::with_capacity(seeds as usize);
        for replicate in 0..seeds {
            let mut stream = rng::stream_rng(seed, ((idx as u64) << 32) | replicate);
            let config = UpstreamConfig::new(n_pre, upstream_noise);
            let data = generate_upstream(covariance, bstar, &config, &mut stream)?;
            let estimate = estimate_representation(&data)?;
            let (_, perturbed) =
                averaged_objective(spectrum, penalty, &estimate.matrix, prior, sigma2, n)?;
            errors.push((perturbed - reference).abs());
        }
        let (mean_error, se) = linalg::mean_se(&errors);
        rows.push(ScalingRow {
            n_pre,
            errors,
            mean_error,
            se,
        });
    }
    let log_n: Vec<f64> = rows.iter().map(|r| (r.n_pre as f64).ln()).collect();
    let log_err: Vec<f64> = rows.iter().map(|r| r.mean_error.max(1e-300).ln()).collect();
    let slope = linalg::fit_slope(&log_n, &log_err);
    Ok((rows, slope))
}
