//! Problem instances and the random generators behind every experiment.
//!
//! A [`ProblemInstance`] bundles the ground truth of one synthetic
//! transfer-learning problem: the covariate covariance, the shared
//! representation whose columns are the source tasks, the task prior, the
//! label-noise level and the dimensions. All sampling is driven by explicit
//! counter-based streams (see [`crate::rng`]), so every experiment is
//! reproducible independently of scheduling.

use alloc::format;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Relative tolerance below which an eigenvalue counts as zero when
/// determining the rank of a covariance.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Relative tolerance for clamping slightly negative eigenvalues of a
/// nominally PSD matrix; anything more negative is rejected.
pub const PSD_CLAMP_TOLERANCE: f64 = 1e-12;

/// Generator specification for a covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSpec {
    /// `Sigma_ij = rho^|i-j|` with `|rho| < 1`.
    Ar1 { rho: f64, p: usize },
    /// `(1/m) W W^T + jitter * I` with `W` a `p x m` standard normal draw.
    WishartJitter { p: usize, m: usize, jitter: f64 },
    Identity { p: usize },
    Explicit(DMatrix<f64>),
}

/// A covariate covariance together with its eigensystem.
///
/// Eigenpairs are sorted by descending eigenvalue; negative eigenvalues within
/// the clamp tolerance are set to zero. The rank `h` counts eigenvalues above
/// [`RANK_TOLERANCE`] relative to the top one.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    matrix: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    rank: usize,
}

impl CovarianceModel {
    /// Builds a covariance from a generator spec. The RNG is consumed only by
    /// the Wishart generator.
    pub fn generate(spec: &CovarianceSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        match spec {
            CovarianceSpec::Ar1 { rho, p } => Self::ar1(*rho, *p),
            CovarianceSpec::WishartJitter { p, m, jitter } => {
                Ok(Self::wishart_jitter(*p, *m, *jitter, rng))
            }
            CovarianceSpec::Identity { p } => Ok(Self::identity(*p)),
            CovarianceSpec::Explicit(matrix) => Self::from_matrix(matrix.clone()),
        }
    }

    pub fn identity(p: usize) -> Self {
        Self::from_psd_unchecked(DMatrix::identity(p, p))
    }

    pub fn ar1(rho: f64, p: usize) -> Result<Self> {
        if rho.abs() >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "AR(1) coefficient must satisfy |rho| < 1, got {rho}"
            )));
        }
        let matrix = DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()));
        Ok(Self::from_psd_unchecked(matrix))
    }

    pub fn wishart_jitter(p: usize, m: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = rng::standard_normal_matrix(p, m, rng);
        let mut matrix = (&w * w.transpose()) / m as f64;
        for i in 0..p {
            matrix[(i, i)] += jitter;
        }
        Self::from_psd_unchecked(matrix)
    }

    /// Wraps an explicit matrix, rejecting asymmetry and negative eigenvalues
    /// beyond the clamp tolerance. The diagnostic carries the most negative
    /// eigenvalue so callers can see how far from PSD the input was.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = linalg::max_abs(&matrix).max(1e-300);
        let asymmetry = linalg::max_abs(&(&matrix - matrix.transpose())) / scale;
        if asymmetry > 1e-12 {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let (values, _) = linalg::sym_eig_desc(&matrix);
        let top = values[0].max(0.0);
        let most_negative = values[values.len() - 1];
        let tolerance = PSD_CLAMP_TOLERANCE * top.max(1e-300);
        if most_negative < -tolerance {
            return Err(Error::NotPsd {
                most_negative,
                tolerance,
            });
        }
        Ok(Self::from_psd_unchecked(matrix))
    }

    fn from_psd_unchecked(matrix: DMatrix<f64>) -> Self {
        let (mut values, vectors) = linalg::sym_eig_desc(&matrix);
        let top = values[0].max(0.0);
        for v in values.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rank = values.iter().filter(|&&v| v > RANK_TOLERANCE * top).count();
        let sqrt = linalg::spectral_map(&values, &vectors, |v| v.sqrt());
        Self {
            matrix,
            sqrt,
            eigenvalues: values,
            eigenvectors: vectors,
            rank,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Rank `h`: the number of eigenvalues above the rank tolerance.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    /// Eigenvalues in descending order, clamped to be non-negative.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, ordered like the eigenvalues.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn top_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Smallest eigenvalue counted in the rank (`eta_min^+`).
    pub fn min_positive_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.rank - 1]
    }
}

/// The shared ground-truth representation; column `i` is source task `i`.
#[derive(Debug, Clone)]
pub struct GroundTruthRepresentation {
    matrix: DMatrix<f64>,
    feature_eigenvalues: DVector<f64>,
    feature_eigenvectors: DMatrix<f64>,
}

impl GroundTruthRepresentation {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "ground-truth representation has non-finite entries".into(),
            ));
        }
        let gram = &matrix * matrix.transpose();
        let (mut values, vectors) = linalg::sym_eig_desc(&gram);
        for v in values.iter_mut() {
            *v = v.max(0.0);
        }
        Ok(Self {
            matrix,
            feature_eigenvalues: values,
            feature_eigenvectors: vectors,
        })
    }

    /// Draws `q` independent `N(0, column_cov)` columns.
    pub fn sample(
        p: usize,
        q: usize,
        column_cov: &CovarianceModel,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if column_cov.dim() != p {
            return Err(Error::DimensionMismatch(format!(
                "column covariance is {}x{} but p = {p}",
                column_cov.dim(),
                column_cov.dim()
            )));
        }
        let z = rng::standard_normal_matrix(p, q, rng);
        Self::from_matrix(column_cov.sqrt() * z)
    }

    /// A representation with `B B^T` equal to an orthogonal projection
    /// (exactly the identity when `q >= p`), so its operator norm is 1
    /// regardless of the number of tasks.
    pub fn sample_orthonormal(p: usize, q: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let g = rng::standard_normal_matrix(p.max(q), p.min(q), rng);
        let qr = g.qr();
        let qmat = qr.q();
        let matrix = if q >= p {
            // q x p orthonormal columns, transposed: B B^T = I_p.
            qmat.transpose()
        } else {
            qmat
        };
        Self::from_matrix(matrix)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn tasks(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn source_task(&self, i: usize) -> DVector<f64> {
        self.matrix.column(i).into_owned()
    }

    /// Eigenvalues of `B B^T` in descending order (for heat maps).
    pub fn feature_eigenvalues(&self) -> &DVector<f64> {
        &self.feature_eigenvalues
    }

    /// Eigenvectors of `B B^T` as columns, ordered like the eigenvalues.
    pub fn feature_eigenvectors(&self) -> &DMatrix<f64> {
        &self.feature_eigenvectors
    }
}

/// Task prior and label-noise level.
///
/// The effective prior covariance of the task coefficients is
/// `(scale / q) * prior_shape`: tasks are drawn as
/// `alpha = sqrt(scale / q) * prior_shape^{1/2} * xi` with standard normal
/// `xi`, so `E ||B alpha||^2 = (scale / q) * tr(B prior_shape B^T)`.
#[derive(Debug, Clone)]
pub struct TaskModel {
    prior_shape: DMatrix<f64>,
    prior_sqrt: DMatrix<f64>,
    scale: f64,
    noise_variance: f64,
}

impl TaskModel {
    pub fn new(prior_shape: DMatrix<f64>, scale: f64, noise_variance: f64) -> Result<Self> {
        if noise_variance <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        if scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "prior scale must be non-negative, got {scale}"
            )));
        }
        let shape = CovarianceModel::from_matrix(prior_shape)?;
        Ok(Self {
            prior_sqrt: shape.sqrt().clone(),
            prior_shape: shape.matrix().clone(),
            scale,
            noise_variance,
        })
    }

    pub fn isotropic(q: usize, scale: f64, noise_variance: f64) -> Result<Self> {
        Self::new(DMatrix::identity(q, q), scale, noise_variance)
    }

    /// Picks the prior scale so that `E ||beta||^2 / sigma^2 = snr^2`.
    /// Analytic, not sampled: the expectation is
    /// `scale * q^{-1} * tr(B prior_shape B^T)`.
    pub fn calibrate_snr(
        representation: &GroundTruthRepresentation,
        prior_shape: &DMatrix<f64>,
        noise_variance: f64,
        target_snr: f64,
    ) -> Result<f64> {
        let q = representation.tasks();
        if prior_shape.nrows() != q || prior_shape.ncols() != q {
            return Err(Error::DimensionMismatch(format!(
                "prior shape is {}x{} but the representation has {q} tasks",
                prior_shape.nrows(),
                prior_shape.ncols()
            )));
        }
        let b = representation.matrix();
        let weighted = b * prior_shape * b.transpose();
        let trace = weighted.trace();
        if trace <= 0.0 {
            return Err(Error::UninformativeRepresentation);
        }
        Ok(target_snr * target_snr * noise_variance * q as f64 / trace)
    }

    pub fn q(&self) -> usize {
        self.prior_shape.nrows()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn prior_shape(&self) -> &DMatrix<f64> {
        &self.prior_shape
    }

    /// The scaled prior `scale * prior_shape` that enters the averaged
    /// objective (the extra `1/q` is part of those formulas).
    pub fn scaled_prior(&self) -> DMatrix<f64> {
        self.scale * &self.prior_shape
    }

    /// Draws task coefficients `alpha = sqrt(scale / q) * prior_shape^{1/2} xi`.
    pub fn sample_alpha(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let q = self.q();
        let xi = rng::standard_normal_vector(q, rng);
        (self.scale / q as f64).sqrt() * (&self.prior_sqrt * xi)
    }
}

/// One supervised dataset: `y = X beta + eps` exactly as generated.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub noise: DVector<f64>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Ground truth for one experiment plus the base RNG seed.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub covariance: CovarianceModel,
    pub representation: GroundTruthRepresentation,
    pub task: TaskModel,
    /// Downstream sample count.
    pub n: usize,
    /// Width of the learned representation (for the end-to-end predictor).
    pub k: usize,
    pub seed: u64,
}

impl ProblemInstance {
    pub fn p(&self) -> usize {
        self.covariance.dim()
    }

    pub fn q(&self) -> usize {
        self.representation.tasks()
    }

    /// Draws `(alpha, beta = B alpha)` for one downstream task.
    pub fn sample_task(&self, rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
        let alpha = self.task.sample_alpha(rng);
        let beta = self.representation.matrix() * &alpha;
        (alpha, beta)
    }

    /// Draws a dataset of `n` rows: `X = Z Sigma^{1/2}` with standard normal
    /// `Z`, and `y = X beta + eps` with `eps ~ N(0, sigma^2 I)`.
    pub fn sample_data(&self, beta: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        sample_data(&self.covariance, beta, self.task.noise_variance(), n, rng)
    }
}

/// Stand-alone dataset sampler used by the Monte Carlo replicates.
pub fn sample_data(
    covariance: &CovarianceModel,
    beta: &DVector<f64>,
    noise_variance: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let z = rng::standard_normal_matrix(n, covariance.dim(), rng);
    let x = z * covariance.sqrt();
    let noise = noise_variance.sqrt() * rng::standard_normal_vector(n, rng);
    let y = &x * beta + &noise;
    Dataset { x, y, noise }
}

/// The four operator norms whose boundedness the asymptotic theory assumes:
/// `1/eta_min^+`, `||Sigma||`, `||Gamma||`, `||Gamma^{-1}||`. The theory never
/// pins a numeric bound, so this is a report, not a gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningReport {
    pub inv_min_positive_eigenvalue: f64,
    pub covariance_norm: f64,
    pub penalty_norm: f64,
    pub penalty_inverse_norm: f64,
}

impl ConditioningReport {
    pub fn max(&self) -> f64 {
        self.inv_min_positive_eigenvalue
            .max(self.covariance_norm)
            .max(self.penalty_norm)
            .max(self.penalty_inverse_norm)
    }

    /// True when every reported norm stays below `threshold`.
    pub fn within(&self, threshold: f64) -> bool {
        self.max() < threshold
    }
}
