//! The downstream ridgeless predictor in closed form.
//!
//! The fitted coefficients are the ridgeless limit of the jointly penalized
//! least-squares problem: `beta = Gamma^{-1} X^T (X Gamma^{-1} X^T)^+ y`,
//! with the companion task weights
//! `alpha = (B^T B + (2 lambda_alpha / lambda) I)^{-1} B^T beta`.
//! The strong-featurization limit gets its own code path
//! ([`fit_strong_featurization`]) instead of a huge finite `lambda`, which
//! would wreck the conditioning of the pseudo-inverse.

use nalgebra::{DMatrix, DVector, RowDVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::Result;
use crate::linalg;
use crate::model::{CovarianceModel, Dataset};
use crate::penalty::{Penalty, Regularization, Representation};

/// Singular values of the data Gram matrix below this fraction of the largest
/// are treated as zero by the pseudo-inverse.
pub const PINV_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitMetadata {
    /// Training rows.
    pub n: usize,
    /// Retained directions of the data Gram matrix.
    pub rank: usize,
    /// Directions truncated by the pseudo-inverse cutoff.
    pub truncated: usize,
}

#[derive(Debug, Clone)]
pub struct FittedPredictor {
    /// Coefficients in covariate space.
    pub coefficients: DVector<f64>,
    /// Coefficients in feature space.
    pub task_weights: DVector<f64>,
    pub metadata: FitMetadata,
}

impl FittedPredictor {
    /// `y(x) = x^T beta`, exactly.
    pub fn predict(&self, x_new: &RowDVector<f64>) -> f64 {
        (x_new * &self.coefficients)[0]
    }
}

/// Fits the predictor for any regularization variant.
pub fn fit(
    data: &Dataset,
    representation: &Representation,
    reg: &Regularization,
) -> Result<FittedPredictor> {
    match reg {
        Regularization::StrongFeaturization => Ok(fit_strong_featurization(data, representation)),
        Regularization::Finite(params) => {
            let penalty = Penalty::build(representation, reg)?;
            let (coefficients, metadata) = fit_with_penalty(data, &penalty);
            // alpha = (B^T B + (2 lambda_alpha / lambda) I)^{-1} B^T beta.
            let b = representation.matrix();
            let k = representation.k();
            let shift = 2.0 * params.lambda_alpha / params.lambda;
            let system = b.transpose() * b + shift * DMatrix::<f64>::identity(k, k);
            let task_weights = linalg::solve_spd(&system, &(b.transpose() * &coefficients));
            Ok(FittedPredictor {
                coefficients,
                task_weights,
                metadata,
            })
        }
        Regularization::NoFeaturization { .. } => {
            let penalty = Penalty::build(representation, reg)?;
            let (coefficients, metadata) = fit_with_penalty(data, &penalty);
            // In this limit the feature weights decouple from the fit.
            Ok(FittedPredictor {
                coefficients,
                task_weights: DVector::zeros(representation.k()),
                metadata,
            })
        }
    }
}

/// Core solve shared by every finite-penalty fit:
/// `beta = G (XG)^T ((XG)(XG)^T)^+ y` with `G = Gamma^{-1/2}`.
pub fn fit_with_penalty(data: &Dataset, penalty: &Penalty) -> (DVector<f64>, FitMetadata) {
    let g = penalty.gamma_inv_sqrt();
    let whitened = &data.x * &g; // n x p
    let gram = &whitened * whitened.transpose(); // n x n
    let (values, vectors) = linalg::sym_eig_desc(&gram);
    let (pinv, kept) = linalg::pinv_psd(&values, &vectors, PINV_CUTOFF);
    let coefficients = &g * (whitened.transpose() * (pinv * &data.y));
    let metadata = FitMetadata {
        n: data.n(),
        rank: kept,
        truncated: data.n() - kept,
    };
    (coefficients, metadata)
}

/// Strong-featurization limit: regress on the featurized data and map back,
/// `alpha_0 = (X B)^+ y`, `beta = B alpha_0`.
pub fn fit_strong_featurization(
    data: &Dataset,
    representation: &Representation,
) -> FittedPredictor {
    let b = representation.matrix();
    let features = &data.x * b; // n x k
    let gram = &features * features.transpose(); // n x n
    let (values, vectors) = linalg::sym_eig_desc(&gram);
    let (pinv, kept) = linalg::pinv_psd(&values, &vectors, PINV_CUTOFF);
    let task_weights = features.transpose() * (pinv * &data.y);
    let coefficients = b * &task_weights;
    FittedPredictor {
        coefficients,
        task_weights,
        metadata: FitMetadata {
            n: data.n(),
            rank: kept,
            truncated: data.n() - kept,
        },
    }
}

/// Out-of-sample risk against a noiseless new label:
/// `(beta - beta_star)^T Sigma (beta - beta_star)`.
pub fn empirical_risk(
    coefficients: &DVector<f64>,
    beta_star: &DVector<f64>,
    covariance: &CovarianceModel,
) -> f64 {
    let delta = coefficients - beta_star;
    (covariance.matrix() * &delta).dot(&delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_data;
    use crate::penalty::RegularizationParams;
    use crate::rng::{standard_normal_matrix, standard_normal_vector, stream_rng};
    use approx::assert_relative_eq;

    fn finite(a: f64, b: f64, l: f64) -> Regularization {
        Regularization::Finite(RegularizationParams::new(a, b, l).unwrap())
    }

    /// Generalized ridge solution at finite ridge strength, used only to
    /// check convergence to the ridgeless limit.
    fn ridge_fit(data: &Dataset, penalty: &Penalty, lambda0: f64) -> DVector<f64> {
        let gamma = penalty.gamma().unwrap();
        let system = data.x.transpose() * &data.x + lambda0 * gamma;
        linalg::solve_spd(&system, &(data.x.transpose() * &data.y))
    }

    #[test]
    fn min_norm_interpolator_in_no_featurization_limit() {
        let mut rng = stream_rng(101, 0);
        let (n, p) = (4, 9);
        let x = standard_normal_matrix(n, p, &mut rng);
        let y = standard_normal_vector(n, &mut rng);
        let data = Dataset {
            x: x.clone(),
            y: y.clone(),
            noise: DVector::zeros(n),
        };
        let rep = Representation::identity(p);
        let fitted = fit(
            &data,
            &rep,
            &Regularization::NoFeaturization { lambda_beta: 3.0 },
        )
        .unwrap();
        // X^T (X X^T)^+ y, independent of lambda_beta.
        let gram = &x * x.transpose();
        let (values, vectors) = linalg::sym_eig_desc(&gram);
        let (pinv, _) = linalg::pinv_psd(&values, &vectors, PINV_CUTOFF);
        let min_norm = x.transpose() * (pinv * &y);
        assert!((fitted.coefficients - min_norm).norm() < 1e-10);
    }

    #[test]
    fn noiseless_identifiable_model_is_recovered_exactly() {
        let mut rng = stream_rng(102, 0);
        let (n, p) = (12, 6);
        let cov = CovarianceModel::ar1(0.4, p).unwrap();
        let beta_star = standard_normal_vector(p, &mut rng);
        let data = sample_data(&cov, &beta_star, 0.0, n, &mut rng);
        let rep = Representation::identity(p);
        let fitted = fit(&data, &rep, &finite(1.0, 0.5, 2.0)).unwrap();
        assert!((&fitted.coefficients - &beta_star).norm() < 1e-8);
        assert!(empirical_risk(&fitted.coefficients, &beta_star, &cov) < 1e-16);
    }

    #[test]
    fn orthogonal_representation_change_of_basis() {
        // p = k, orthogonal B, lambda_alpha / lambda -> 0: alpha = B^T beta.
        let mut rng = stream_rng(103, 0);
        let p = 5;
        let raw = standard_normal_matrix(p, p, &mut rng);
        let ortho = raw.qr().q();
        let rep = Representation::from_matrix(ortho.clone()).unwrap();
        let cov = CovarianceModel::identity(p);
        let beta_star = standard_normal_vector(p, &mut rng);
        let data = sample_data(&cov, &beta_star, 0.1, 3, &mut rng);
        let fitted = fit(&data, &rep, &finite(1e-9, 0.4, 1.0)).unwrap();
        let expected = ortho.transpose() * &fitted.coefficients;
        assert!((fitted.task_weights - expected).norm() < 1e-6);
    }

    #[test]
    fn strong_featurization_with_identity_is_min_norm() {
        let mut rng = stream_rng(104, 0);
        let (n, p) = (3, 7);
        let x = standard_normal_matrix(n, p, &mut rng);
        let y = standard_normal_vector(n, &mut rng);
        let data = Dataset {
            x: x.clone(),
            y: y.clone(),
            noise: DVector::zeros(n),
        };
        let rep = Representation::identity(p);
        let strong = fit_strong_featurization(&data, &rep);
        let plain = fit(
            &data,
            &rep,
            &Regularization::NoFeaturization { lambda_beta: 1.0 },
        )
        .unwrap();
        assert!((strong.coefficients - plain.coefficients).norm() < 1e-10);
    }

    #[test]
    fn strong_featurization_zero_labels_zero_fit() {
        let mut rng = stream_rng(105, 0);
        let data = Dataset {
            x: standard_normal_matrix(4, 6, &mut rng),
            y: DVector::zeros(4),
            noise: DVector::zeros(4),
        };
        let rep = Representation::from_matrix(standard_normal_matrix(6, 2, &mut rng)).unwrap();
        let fitted = fit_strong_featurization(&data, &rep);
        assert_eq!(fitted.task_weights.norm(), 0.0);
        assert_eq!(fitted.coefficients.norm(), 0.0);
    }

    #[test]
    fn large_lambda_fit_approaches_strong_featurization() {
        // The ridgeless fit interpolates all of y whenever the penalty is
        // finite, so the large-lambda limit can only reach the featurized fit
        // when y is itself reachable in feature space. Both such regimes are
        // checked: a wide feature map, and a realizable noiseless instance.
        let mut rng = stream_rng(106, 0);
        let (n, p, k) = (10, 20, 12);
        let cov = CovarianceModel::identity(p);
        let beta_star = standard_normal_vector(p, &mut rng);
        let data = sample_data(&cov, &beta_star, 0.5, n, &mut rng);
        let rep = Representation::from_matrix(standard_normal_matrix(p, k, &mut rng)).unwrap();
        let strong = fit_strong_featurization(&data, &rep);
        let near_limit = fit(&data, &rep, &finite(1.0, 1e-9, 1e6)).unwrap();
        let gap = (&near_limit.coefficients - &strong.coefficients).norm();
        assert!(gap <= 1e-3, "wide-feature limit gap {gap}");

        let (n, p, k) = (10, 20, 5);
        let b = standard_normal_matrix(p, k, &mut rng);
        let rep = Representation::from_matrix(b.clone()).unwrap();
        let alpha_star = standard_normal_vector(k, &mut rng);
        let beta_star = &b * &alpha_star;
        let data = sample_data(&cov, &beta_star, 0.0, n, &mut rng);
        let _ = p;
        let strong = fit_strong_featurization(&data, &rep);
        let near_limit = fit(&data, &rep, &finite(1.0, 1e-9, 1e6)).unwrap();
        let gap = (&near_limit.coefficients - &strong.coefficients).norm();
        assert!(gap <= 1e-3, "realizable limit gap {gap}");
    }

    #[test]
    fn empirical_risk_examples() {
        let p = 4;
        let cov = CovarianceModel::ar1(0.6, p).unwrap();
        let beta = DVector::from_element(p, 1.0);
        assert_eq!(empirical_risk(&beta, &beta, &cov), 0.0);
        // Identity covariance reduces to the squared distance.
        let identity = CovarianceModel::identity(p);
        let other = DVector::from_element(p, 0.0);
        assert_relative_eq!(
            empirical_risk(&beta, &other, &identity),
            beta.norm_squared(),
            epsilon = 1e-14
        );
        // Difference along the top eigenvector scores the top eigenvalue.
        let top: DVector<f64> = cov.eigenvectors().column(0).into_owned();
        let shifted = &beta + &top;
        assert_relative_eq!(
            empirical_risk(&shifted, &beta, &cov),
            cov.top_eigenvalue(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ridge_limit_converges_to_ridgeless_fit() {
        let mut rng = stream_rng(107, 0);
        for trial in 0..5 {
            let (n, p, k) = (4, 8, 3);
            let cov = CovarianceModel::ar1(0.3, p).unwrap();
            let beta_star = standard_normal_vector(p, &mut rng);
            let data = sample_data(&cov, &beta_star, 0.2, n, &mut rng);
            let rep =
                Representation::from_matrix(standard_normal_matrix(p, k, &mut rng)).unwrap();
            let reg = finite(0.8, 0.3, 1.1);
            let fitted = fit(&data, &rep, &reg).unwrap();
            let penalty = Penalty::build(&rep, &reg).unwrap();
            let err6 = (ridge_fit(&data, &penalty, 1e-6) - &fitted.coefficients).norm();
            let err8 = (ridge_fit(&data, &penalty, 1e-8) - &fitted.coefficients).norm();
            assert!(
                err8 <= 10.0 * err6,
                "trial {trial}: no first-order ridge convergence ({err8} vs {err6})"
            );
            assert!(err8 <= 1e-5, "trial {trial}: ridge limit too far ({err8})");
        }
    }

    #[test]
    fn whitened_route_matches_direct_route() {
        // Predictions through G (XG)^T ((XG)(XG)^T)^+ y must equal
        // Gamma^{-1} X^T (X Gamma^{-1} X^T)^+ y computed with explicit
        // inverses.
        let mut rng = stream_rng(108, 0);
        let (n, p, k) = (5, 9, 4);
        let cov = CovarianceModel::identity(p);
        let beta_star = standard_normal_vector(p, &mut rng);
        let data = sample_data(&cov, &beta_star, 0.3, n, &mut rng);
        let rep = Representation::from_matrix(standard_normal_matrix(p, k, &mut rng)).unwrap();
        let reg = finite(0.9, 0.2, 1.4);
        let fitted = fit(&data, &rep, &reg).unwrap();

        let penalty = Penalty::build(&rep, &reg).unwrap();
        let gamma_inv = penalty.gamma_inv();
        let core = &data.x * &gamma_inv * data.x.transpose();
        let (values, vectors) = linalg::sym_eig_desc(&core);
        let (pinv, _) = linalg::pinv_psd(&values, &vectors, PINV_CUTOFF);
        let direct = gamma_inv * data.x.transpose() * (pinv * &data.y);

        for trial in 0..10 {
            let x_new = standard_normal_vector(p, &mut stream_rng(108, 10 + trial)).transpose();
            let a = (&x_new * &fitted.coefficients)[0];
            let b = (&x_new * &direct)[0];
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn joint_loss_optimality_on_tiny_instances() {
        // At small but finite ridge strength, the closed-form pair
        // (beta, alpha) must reach the joint penalized loss value found by a
        // generic numerical minimizer from many random starts.
        let mut rng = stream_rng(109, 0);
        let (n, p, k) = (4, 6, 3);
        let lambda0 = 1e-6;
        let params = RegularizationParams::new(0.7, 0.4, 1.3).unwrap();
        let cov = CovarianceModel::identity(p);
        let beta_star = standard_normal_vector(p, &mut rng);
        let data = sample_data(&cov, &beta_star, 0.3, n, &mut rng);
        let b = standard_normal_matrix(p, k, &mut rng);
        let rep = Representation::from_matrix(b.clone()).unwrap();

        let loss = |beta: &DVector<f64>, alpha: &DVector<f64>| -> f64 {
            let resid = &data.y - &data.x * beta;
            let feat = beta - &b * alpha;
            resid.norm_squared()
                + lambda0
                    * (params.lambda * feat.norm_squared()
                        + params.lambda_alpha * alpha.norm_squared()
                        + params.lambda_beta * beta.norm_squared())
        };

        // Closed form at finite lambda0: beta solves
        // (X^T X + lambda0 Gamma) beta = X^T y; alpha follows beta.
        let penalty = Penalty::build(&rep, &Regularization::Finite(params)).unwrap();
        let beta_ridge = ridge_fit(&data, &penalty, lambda0);
        let shift = 2.0 * params.lambda_alpha / params.lambda;
        let system = b.transpose() * &b + shift * DMatrix::<f64>::identity(k, k);
        let alpha_ridge = linalg::solve_spd(&system, &(b.transpose() * &beta_ridge));
        let closed_value = loss(&beta_ridge, &alpha_ridge);

        // Generic minimizer: gradient descent with backtracking on the joint
        // variable, from 20 random starts.
        let mut best = f64::INFINITY;
        for start in 0..20 {
            let mut beta = standard_normal_vector(p, &mut stream_rng(109, 100 + start));
            let mut alpha = standard_normal_vector(k, &mut stream_rng(109, 200 + start));
            let mut step = 1e-3;
            let mut value = loss(&beta, &alpha);
            for _ in 0..20_000 {
                let resid = &data.y - &data.x * &beta;
                let feat = &beta - &b * &alpha;
                let grad_beta = -2.0 * data.x.transpose() * &resid
                    + lambda0 * (2.0 * params.lambda * &feat + 2.0 * params.lambda_beta * &beta);
                let grad_alpha = lambda0
                    * (-2.0 * params.lambda * b.transpose() * &feat
                        + 2.0 * params.lambda_alpha * &alpha);
                let mut t = step;
                loop {
                    let candidate_beta = &beta - t * &grad_beta;
                    let candidate_alpha = &alpha - t * &grad_alpha;
                    let candidate = loss(&candidate_beta, &candidate_alpha);
                    if candidate <= value || t < 1e-18 {
                        beta = candidate_beta;
                        alpha = candidate_alpha;
                        value = candidate;
                        step = t * 2.0;
                        break;
                    }
                    t *= 0.5;
                }
            }
            best = best.min(value);
        }
        assert!(
            closed_value <= best + 1e-8,
            "closed form {closed_value} vs numeric {best}"
        );
    }

    #[test]
    fn pseudo_inverse_truncation_is_reported() {
        // Duplicate a row: the Gram matrix drops rank and the truncation is
        // surfaced in the metadata instead of an error.
        let mut rng = stream_rng(110, 0);
        let (n, p) = (4, 8);
        let mut x = standard_normal_matrix(n, p, &mut rng);
        let first_row = x.row(0).into_owned();
        x.set_row(1, &first_row);
        let beta = standard_normal_vector(p, &mut rng);
        let y = &x * &beta;
        let data = Dataset {
            x,
            y,
            noise: DVector::zeros(n),
        };
        let rep = Representation::identity(p);
        let fitted = fit(&data, &rep, &finite(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(fitted.metadata.rank, n - 1);
        assert_eq!(fitted.metadata.truncated, 1);
    }
}
