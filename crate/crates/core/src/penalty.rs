//! The generalized-ridge operator induced by a learned representation.
//!
//! A representation `B` (p x k) and regularization strengths
//! `(lambda_alpha, lambda_beta, lambda)` define a quadratic penalty matrix
//! `Gamma` whose eigenbasis is the left singular basis of `B` and whose
//! eigenvalues come from the scalar shrink profile [`shrink_profile`]:
//! featurizing along a direction is the same as penalizing its complement,
//! and the profile is strictly decreasing in the squared singular value.
//!
//! Infinite weights are first-class: a direction with weight infinity is
//! completely discarded by the predictor, which is how hard feature selection
//! is encoded. `Gamma^{-1/2}` and `Gamma^{-1}` assign zero to such
//! directions; the finite part of `Gamma^{1/2}` is available for quadratic
//! forms over vectors orthogonal to them.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::CovarianceModel;

/// Strictly positive regularization strengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationParams {
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub lambda: f64,
}

impl RegularizationParams {
    pub fn new(lambda_alpha: f64, lambda_beta: f64, lambda: f64) -> Result<Self> {
        for (name, value) in [
            ("lambda_alpha", lambda_alpha),
            ("lambda_beta", lambda_beta),
            ("lambda", lambda),
        ] {
            if value <= 0.0 || !value.is_finite() {
                return Err(Error::InvalidRegularization(format!(
                    "{name} must be a positive finite number, got {value}"
                )));
            }
        }
        Ok(Self {
            lambda_alpha,
            lambda_beta,
            lambda,
        })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda_alpha, self.lambda_beta, self.lambda]
    }
}

/// Regularization including the limiting regimes, which are explicit variants
/// rather than extreme numeric values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regularization {
    Finite(RegularizationParams),
    /// The `lambda -> 0` (equivalently `lambda_alpha -> 0`) limit: the
    /// representation drops out and the penalty collapses to
    /// `lambda_beta * I`.
    NoFeaturization { lambda_beta: f64 },
    /// The `lambda -> infinity`, `lambda_beta -> 0` limit: predictions regress
    /// on the featurized data directly. There is no finite penalty operator;
    /// the predictor has a dedicated path for it.
    StrongFeaturization,
}

/// Penalty eigenvalue for a squared singular value `d_sq` (infinity allowed):
/// `lambda_beta + lambda_alpha (d^2 + 4 a) / (d^2 + 2 a)^2` with
/// `a = lambda_alpha / lambda`. Decreases strictly from
/// `lambda_beta + lambda` at `d^2 = 0` to `lambda_beta` at `d^2 = infinity`.
pub fn shrink_profile(d_sq: f64, params: &RegularizationParams) -> f64 {
    if d_sq.is_infinite() {
        return params.lambda_beta;
    }
    let a = params.lambda_alpha / params.lambda;
    let denom = d_sq + 2.0 * a;
    params.lambda_beta + params.lambda_alpha * (d_sq + 4.0 * a) / (denom * denom)
}

/// Derivative of [`shrink_profile`] in `d_sq`.
pub fn shrink_profile_deriv(d_sq: f64, params: &RegularizationParams) -> f64 {
    let a = params.lambda_alpha / params.lambda;
    let denom = d_sq + 2.0 * a;
    -params.lambda_alpha * (d_sq + 6.0 * a) / (denom * denom * denom)
}

/// Gradient of [`shrink_profile`] in `(lambda_alpha, lambda_beta, lambda)`.
pub fn shrink_profile_reg_grad(d_sq: f64, params: &RegularizationParams) -> [f64; 3] {
    let a = params.lambda_alpha / params.lambda;
    let denom = d_sq + 2.0 * a;
    let d_alpha = (d_sq + 4.0 * a) / (denom * denom) - 8.0 * a * a / (denom * denom * denom);
    let d_lambda = 8.0 * a * a * a / (denom * denom * denom);
    [d_alpha, 1.0, d_lambda]
}

/// A representation `B` with its full singular system: an orthonormal left
/// basis for all of `R^p` (singular directions first, descending), the
/// singular values (zero past the rank), and the right factor.
#[derive(Debug, Clone)]
pub struct Representation {
    matrix: DMatrix<f64>,
    left_basis: DMatrix<f64>,
    singular_values: DVector<f64>,
    right_basis: DMatrix<f64>,
}

impl Representation {
    /// Factorizes `B` through the eigensystem of `B B^T`, which yields the
    /// left basis for all of `R^p` directly (the plain SVD only spans the
    /// range of `B`). Rows of the right factor beyond the rank are completed
    /// to an orthonormal basis.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "representation has non-finite entries".into(),
            ));
        }
        let p = matrix.nrows();
        let k = matrix.ncols();
        let gram = &matrix * matrix.transpose();
        let (values, left_basis) = linalg::sym_eig_desc(&gram);
        let top = values[0].max(0.0);
        let sv_cutoff = (1e-14 * top).sqrt();
        let singular_values =
            DVector::from_iterator(p, values.iter().map(|&v| v.max(0.0).sqrt()));

        // Right factor: rows i with d_i > 0 are (Q^T B)_i / d_i; the rest are
        // completed by Gram-Schmidt against the canonical basis.
        let projected = left_basis.transpose() * &matrix; // p x k, row i = d_i * o_i
        let mut right_rows: Vec<DVector<f64>> = Vec::with_capacity(k);
        for i in 0..p.min(k) {
            if singular_values[i] > sv_cutoff {
                right_rows.push(projected.row(i).transpose() / singular_values[i]);
            }
        }
        let mut canon = 0;
        while right_rows.len() < k && canon < k {
            let mut candidate: DVector<f64> = DVector::zeros(k);
            candidate[canon] = 1.0;
            canon += 1;
            for row in &right_rows {
                let coeff = row.dot(&candidate);
                candidate -= coeff * row;
            }
            let norm = candidate.norm();
            if norm > 1e-8 {
                right_rows.push(candidate / norm);
            }
        }
        let mut right_basis = DMatrix::zeros(k, k);
        for (i, row) in right_rows.iter().enumerate() {
            right_basis.set_row(i, &row.transpose());
        }

        Ok(Self {
            matrix,
            left_basis,
            singular_values,
            right_basis,
        })
    }

    pub fn identity(p: usize) -> Self {
        Self::from_matrix(DMatrix::identity(p, p)).expect("identity is finite")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn k(&self) -> usize {
        self.matrix.ncols()
    }

    /// Columns are the left singular directions, all `p` of them, ordered by
    /// descending singular value.
    pub fn left_basis(&self) -> &DMatrix<f64> {
        &self.left_basis
    }

    /// Singular values for every one of the `p` left directions (zero beyond
    /// the rank of `B`).
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn right_basis(&self) -> &DMatrix<f64> {
        &self.right_basis
    }
}

/// The penalty operator: an orthonormal eigenbasis and one weight per
/// direction, each in `(0, +infinity]`.
#[derive(Debug, Clone)]
pub struct Penalty {
    basis: DMatrix<f64>,
    weights: DVector<f64>,
}

impl Penalty {
    /// Builds the penalty induced by a representation.
    ///
    /// The strong-featurization limit has no finite operator and is rejected
    /// here; the ridgeless-limit variant collapses to `lambda_beta * I`
    /// regardless of the representation.
    pub fn build(representation: &Representation, reg: &Regularization) -> Result<Self> {
        match reg {
            Regularization::Finite(params) => {
                let weights = DVector::from_iterator(
                    representation.p(),
                    representation
                        .singular_values()
                        .iter()
                        .map(|&d| shrink_profile(d * d, params)),
                );
                Ok(Self {
                    basis: representation.left_basis().clone(),
                    weights,
                })
            }
            Regularization::NoFeaturization { lambda_beta } => {
                Self::isotropic(representation.p(), *lambda_beta)
            }
            Regularization::StrongFeaturization => Err(Error::StrongFeaturizationPenalty),
        }
    }

    /// `lambda_beta * I`: the no-featurization penalty.
    pub fn isotropic(p: usize, lambda_beta: f64) -> Result<Self> {
        if lambda_beta.is_nan() || lambda_beta <= 0.0 {
            return Err(Error::InvalidRegularization(format!(
                "isotropic penalty needs lambda_beta > 0, got {lambda_beta}"
            )));
        }
        Ok(Self {
            basis: DMatrix::identity(p, p),
            weights: DVector::from_element(p, lambda_beta),
        })
    }

    /// Builds a penalty from an explicit eigenbasis and weights. Weights may
    /// be `+infinity` (hard-discarded directions) but not zero or negative:
    /// the operator must stay invertible from the penalized side.
    pub fn from_eigenbasis(basis: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if basis.nrows() != basis.ncols() || basis.nrows() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "basis {}x{} with {} weights",
                basis.nrows(),
                basis.ncols(),
                weights.len()
            )));
        }
        let p = basis.nrows();
        let gram = basis.transpose() * &basis;
        if linalg::max_abs(&(gram - DMatrix::<f64>::identity(p, p))) > 1e-8 {
            return Err(Error::InvalidArgument(
                "penalty basis is not orthonormal".into(),
            ));
        }
        if weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
            return Err(Error::InvalidRegularization(
                "penalty weights must be strictly positive (infinity allowed)".into(),
            ));
        }
        Ok(Self { basis, weights })
    }

    pub fn p(&self) -> usize {
        self.weights.len()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn has_infinite_weights(&self) -> bool {
        self.weights.iter().any(|w| w.is_infinite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        linalg::spectral_map(&self.weights, &self.basis, f)
    }

    /// The penalty matrix itself; only available when all weights are finite.
    pub fn gamma(&self) -> Result<DMatrix<f64>> {
        if self.has_infinite_weights() {
            return Err(Error::InvalidArgument(
                "penalty has discarded directions; the operator is not finite".into(),
            ));
        }
        Ok(self.map(|w| w))
    }

    /// `Gamma^{-1}`; discarded directions map to zero.
    pub fn gamma_inv(&self) -> DMatrix<f64> {
        self.map(|w| if w.is_infinite() { 0.0 } else { 1.0 / w })
    }

    /// `Gamma^{-1/2}`; discarded directions map to zero.
    pub fn gamma_inv_sqrt(&self) -> DMatrix<f64> {
        self.map(|w| if w.is_infinite() { 0.0 } else { 1.0 / w.sqrt() })
    }

    /// The finite part of `Gamma^{1/2}`: discarded directions map to zero.
    /// Quadratic forms through this matrix are exact for vectors orthogonal
    /// to the discarded directions, which is the only place it is used.
    pub fn gamma_sqrt_finite(&self) -> DMatrix<f64> {
        self.map(|w| if w.is_infinite() { 0.0 } else { w.sqrt() })
    }

    /// Operator norms `(||Gamma||, ||Gamma^{-1}||)` over the finite part.
    pub fn norms(&self) -> (f64, f64) {
        let mut max_w = 0.0_f64;
        let mut min_w = f64::INFINITY;
        for &w in self.weights.iter() {
            if w.is_finite() {
                max_w = max_w.max(w);
            }
            min_w = min_w.min(w);
        }
        (max_w, 1.0 / min_w)
    }
}

/// Reports the four operator norms the asymptotic theory assumes bounded.
pub fn conditioning_report(
    covariance: &CovarianceModel,
    penalty: &Penalty,
) -> crate::model::ConditioningReport {
    let (gamma_norm, gamma_inv_norm) = penalty.norms();
    crate::model::ConditioningReport {
        inv_min_positive_eigenvalue: 1.0 / covariance.min_positive_eigenvalue(),
        covariance_norm: covariance.top_eigenvalue(),
        penalty_norm: gamma_norm,
        penalty_inverse_norm: gamma_inv_norm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;

    fn params(a: f64, b: f64, l: f64) -> RegularizationParams {
        RegularizationParams::new(a, b, l).unwrap()
    }

    #[test]
    fn shrink_profile_end_points() {
        let p = params(0.7, 0.3, 2.0);
        assert_relative_eq!(shrink_profile(0.0, &p), 0.3 + 2.0, epsilon = 1e-14);
        assert_relative_eq!(shrink_profile(f64::INFINITY, &p), 0.3, epsilon = 1e-14);
    }

    #[test]
    fn shrink_profile_hand_value() {
        let p = params(1.0, 1e-300, 1.0);
        // lambda_beta ~ 0: (2 + 4) / (2 + 2)^2 = 0.375.
        assert_relative_eq!(shrink_profile(2.0, &p), 0.375, epsilon = 1e-12);
    }

    #[test]
    fn shrink_profile_monotone_on_grid() {
        let p = params(0.9, 0.1, 3.0);
        let mut previous = shrink_profile(0.0, &p);
        for i in 1..1000 {
            let d_sq = i as f64 * 0.05;
            let current = shrink_profile(d_sq, &p);
            assert!(
                current < previous,
                "profile not strictly decreasing at d_sq = {d_sq}"
            );
            previous = current;
        }
        assert!(previous > p.lambda_beta);
    }

    #[test]
    fn shrink_profile_derivatives_match_finite_differences() {
        let p = params(0.8, 0.2, 1.7);
        let step = 1e-6;
        for &d_sq in &[0.4, 2.3, 11.0] {
            let fd = (shrink_profile(d_sq + step, &p) - shrink_profile(d_sq - step, &p))
                / (2.0 * step);
            assert_relative_eq!(
                shrink_profile_deriv(d_sq, &p),
                fd,
                epsilon = 1e-6,
                max_relative = 1e-5
            );
        }
        let d_sq = 1.3;
        let base = p.as_array();
        let grad = shrink_profile_reg_grad(d_sq, &p);
        for axis in 0..3 {
            let mut hi = base;
            let mut lo = base;
            hi[axis] += step;
            lo[axis] -= step;
            let fd = (shrink_profile(d_sq, &params(hi[0], hi[1], hi[2]))
                - shrink_profile(d_sq, &params(lo[0], lo[1], lo[2])))
                / (2.0 * step);
            assert_relative_eq!(grad[axis], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn representation_factorization_round_trip() {
        let mut rng = stream_rng(41, 0);
        for &(p, k) in &[(8_usize, 3_usize), (5, 5), (4, 7)] {
            let b = crate::rng::standard_normal_matrix(p, k, &mut rng);
            let rep = Representation::from_matrix(b.clone()).unwrap();
            let q = rep.left_basis();
            let o = rep.right_basis();
            let scale = rep.singular_values()[0];
            // Orthogonality of both factors.
            assert!(
                linalg::max_abs(&(q.transpose() * q - DMatrix::<f64>::identity(p, p))) < 1e-10
            );
            assert!(
                linalg::max_abs(&(o.transpose() * o - DMatrix::<f64>::identity(k, k))) < 1e-10
            );
            // Reconstruction B = Q D O.
            let mut d = DMatrix::zeros(p, k);
            for i in 0..p.min(k) {
                d[(i, i)] = rep.singular_values()[i];
            }
            let rebuilt = q * d * o;
            assert!(linalg::max_abs(&(rebuilt - &b)) <= 1e-9 * scale);
            // Ordering.
            for i in 1..p {
                assert!(rep.singular_values()[i] <= rep.singular_values()[i - 1]);
            }
        }
    }

    #[test]
    fn identity_representation_gives_isotropic_penalty() {
        let p = 6;
        let rep = Representation::identity(p);
        let reg_params = params(0.5, 0.2, 1.5);
        let pen = Penalty::build(&rep, &Regularization::Finite(reg_params)).unwrap();
        let expected = shrink_profile(1.0, &reg_params);
        let gamma = pen.gamma().unwrap();
        assert!(linalg::max_abs(&(gamma - expected * DMatrix::<f64>::identity(p, p))) < 1e-12);
    }

    #[test]
    fn no_featurization_limit_is_isotropic() {
        let rep = Representation::from_matrix(crate::rng::standard_normal_matrix(
            5,
            3,
            &mut stream_rng(4, 0),
        ))
        .unwrap();
        let pen =
            Penalty::build(&rep, &Regularization::NoFeaturization { lambda_beta: 0.7 }).unwrap();
        let gamma = pen.gamma().unwrap();
        assert!(linalg::max_abs(&(gamma - 0.7 * DMatrix::<f64>::identity(5, 5))) < 1e-12);
    }

    #[test]
    fn strong_featurization_has_no_operator() {
        let rep = Representation::identity(3);
        assert!(matches!(
            Penalty::build(&rep, &Regularization::StrongFeaturization),
            Err(Error::StrongFeaturizationPenalty)
        ));
    }

    #[test]
    fn svd_route_matches_direct_matrix_formula() {
        // Gamma from the singular system equals
        // lambda (I - B (B^T B + 2a I)^{-1} B^T)^2
        //   + lambda_alpha B (B^T B + 2a I)^{-2} B^T + lambda_beta I.
        let mut rng = stream_rng(8, 0);
        let p = 8;
        let k = 3;
        let b = crate::rng::standard_normal_matrix(p, k, &mut rng);
        let reg_params = params(0.6, 0.25, 1.2);
        let rep = Representation::from_matrix(b.clone()).unwrap();
        let pen = Penalty::build(&rep, &Regularization::Finite(reg_params)).unwrap();
        let gamma = pen.gamma().unwrap();

        let a = reg_params.lambda_alpha / reg_params.lambda;
        let inner = b.transpose() * &b + 2.0 * a * DMatrix::<f64>::identity(k, k);
        let inner_inv = inner.clone().try_inverse().unwrap();
        let proj = DMatrix::<f64>::identity(p, p) - &b * &inner_inv * b.transpose();
        let direct = reg_params.lambda * &proj * &proj
            + reg_params.lambda_alpha * &b * &inner_inv * &inner_inv * b.transpose()
            + reg_params.lambda_beta * DMatrix::<f64>::identity(p, p);
        let scale = linalg::max_abs(&direct);
        assert!(linalg::max_abs(&(gamma - direct)) <= 1e-9 * scale);
    }

    #[test]
    fn weight_ordering_inverts_singular_ordering() {
        let mut rng = stream_rng(15, 0);
        let rep =
            Representation::from_matrix(crate::rng::standard_normal_matrix(7, 7, &mut rng))
                .unwrap();
        let reg_params = params(1.1, 0.2, 0.9);
        let pen = Penalty::build(&rep, &Regularization::Finite(reg_params)).unwrap();
        // Singular values descend, so weights must ascend.
        for i in 1..7 {
            assert!(pen.weights()[i] >= pen.weights()[i - 1]);
        }
        // Spectral bounds.
        for &w in pen.weights().iter() {
            assert!(w >= reg_params.lambda_beta - 1e-15);
            assert!(w <= reg_params.lambda_beta + reg_params.lambda + 1e-15);
        }
    }

    #[test]
    fn inverse_square_root_inverts_on_finite_directions() {
        let basis = DMatrix::<f64>::identity(4, 4);
        let weights = DVector::from_vec(alloc::vec![2.0, 1.0, f64::INFINITY, 0.5]);
        let pen = Penalty::from_eigenbasis(basis, weights).unwrap();
        let product = pen.gamma_sqrt_finite() * pen.gamma_inv_sqrt();
        // Identity on finite directions, zero on the discarded one.
        let expected =
            DMatrix::from_diagonal(&DVector::from_vec(alloc::vec![1.0, 1.0, 0.0, 1.0]));
        assert!(linalg::max_abs(&(product - expected)) < 1e-12);
    }

    #[test]
    fn finite_penalty_sqrt_roundtrip() {
        let mut rng = stream_rng(21, 0);
        let rep =
            Representation::from_matrix(crate::rng::standard_normal_matrix(6, 4, &mut rng))
                .unwrap();
        let pen = Penalty::build(&rep, &Regularization::Finite(params(0.4, 0.3, 2.0))).unwrap();
        let product = pen.gamma_sqrt_finite() * pen.gamma_inv_sqrt();
        assert!(
            linalg::max_abs(&(product - DMatrix::<f64>::identity(6, 6))) <= 1e-9,
            "sqrt factors do not invert"
        );
    }

    #[test]
    fn zero_weights_rejected() {
        let basis = DMatrix::<f64>::identity(2, 2);
        let weights = DVector::from_vec(alloc::vec![1.0, 0.0]);
        assert!(Penalty::from_eigenbasis(basis, weights).is_err());
    }
}
