//! Property tests for the cross-module invariants that hold on any input,
//! not just the seeded instances of the unit tests.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use transfer_risk_core::asymptotics::{risk_components, solve_b0_from_eigenvalues, whiten};
use transfer_risk_core::model::CovarianceModel;
use transfer_risk_core::penalty::{
    shrink_profile, Penalty, Regularization, RegularizationParams, Representation,
};
use transfer_risk_core::spectrum_opt::{from_x_space, is_feasible, project_feasible, to_x_space};

fn positive() -> impl Strategy<Value = f64> {
    (-3.0_f64..3.0).prop_map(|v| v.exp())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The shrink profile always lands inside its spectral window and
    /// decreases in the squared singular value.
    #[test]
    fn shrink_profile_window(
        la in positive(),
        lb in positive(),
        ll in positive(),
        d1 in 0.0_f64..50.0,
        gap in 1e-6_f64..50.0,
    ) {
        let params = RegularizationParams::new(la, lb, ll).unwrap();
        let lo = shrink_profile(d1 + gap, &params);
        let hi = shrink_profile(d1, &params);
        prop_assert!(lo < hi);
        prop_assert!(lo >= params.lambda_beta);
        prop_assert!(hi <= params.lambda_beta + params.lambda + 1e-12 * (params.lambda_beta + params.lambda));
    }

    /// Fixed point: residual within tolerance, inside the provable bracket,
    /// and equivariant under rescaling the spectrum.
    #[test]
    fn fixed_point_bracket_and_scaling(
        raw in proptest::collection::vec(-2.0_f64..2.0, 2..40),
        n_frac in 0.05_f64..0.95,
        scale in positive(),
    ) {
        let t: Vec<f64> = raw.iter().map(|v| v.exp()).collect();
        let h = t.len();
        let n = ((h as f64 * n_frac) as usize).clamp(1, h - 1);
        let fp = solve_b0_from_eigenvalues(&t, n).unwrap();
        prop_assert!(fp.residual <= 1e-12 * h as f64);
        prop_assert!(fp.value >= fp.lower * (1.0 - 1e-12));
        prop_assert!(fp.value <= fp.upper * (1.0 + 1e-12));
        let scaled: Vec<f64> = t.iter().map(|&v| v * scale).collect();
        let fp2 = solve_b0_from_eigenvalues(&scaled, n).unwrap();
        prop_assert!((fp2.value * scale - fp.value).abs() <= 1e-9 * fp.value.max(1e-12));
    }

    /// Constraint-space round trip is the identity on feasible points, and
    /// the projection always produces feasible points.
    #[test]
    fn x_space_round_trip(
        raw in proptest::collection::vec(-1.0_f64..2.0, 2..20),
        n_frac in 0.05_f64..0.95,
        scale in positive(),
        eta_raw in proptest::collection::vec(-1.0_f64..1.0, 2..20),
    ) {
        let h = raw.len().min(eta_raw.len());
        let n = ((h as f64 * n_frac) as usize).clamp(1, h - 1);
        let y = DVector::from_iterator(h, raw.iter().take(h).cloned());
        let x = project_feasible(&y, n);
        prop_assert!(is_feasible(&x, n, 1e-9));
        let eta = DVector::from_iterator(h, eta_raw.iter().take(h).map(|v| v.exp()));
        let weights = from_x_space(&x, &eta, scale);
        let back = to_x_space(&weights, &eta, scale);
        for i in 0..h {
            prop_assert!((back[i] - x[i]).abs() <= 1e-9);
        }
    }

    /// Full-pipeline sanity on random small instances: the whitened support
    /// matches the covariance rank, the risk report is non-negative and the
    /// identity risk = bias (1 + V) + sigma^2 V holds exactly.
    #[test]
    fn pipeline_risk_identity(
        seed in 0_u64..1000,
        p in 3_usize..10,
        k in 1_usize..6,
        la in positive(),
        lb in positive(),
        ll in positive(),
    ) {
        let mut rng = transfer_risk_core::rng::stream_rng(777, seed);
        let cov = CovarianceModel::wishart_jitter(p, p, 0.01, &mut rng);
        let b = transfer_risk_core::rng::standard_normal_matrix(p, k, &mut rng);
        let rep = Representation::from_matrix(b).unwrap();
        let params = RegularizationParams::new(la, lb, ll).unwrap();
        let pen = Penalty::build(&rep, &Regularization::Finite(params)).unwrap();
        let spec = whiten(&cov, &pen).unwrap();
        prop_assert_eq!(spec.support(), cov.rank());
        let n = 1 + (seed as usize % (p - 1));
        let beta = transfer_risk_core::rng::standard_normal_vector(p, &mut rng);
        if n != spec.support() {
            let report = risk_components(&spec, &pen, &beta, 1.0, n).unwrap();
            prop_assert!(report.bias >= 0.0);
            prop_assert!(report.risk >= 0.0);
            if let Some(v) = report.variance_factor {
                prop_assert!(v >= 0.0);
                let identity = report.bias * (1.0 + v) + v;
                prop_assert!((identity - report.risk).abs() <= 1e-12 * report.risk.max(1.0));
                // The bias never exceeds the signal energy.
                let energy = (cov.matrix() * &beta).dot(&beta);
                prop_assert!(report.bias <= energy * (1.0 + 1e-9));
            }
        }
    }

    /// Penalties built from any representation keep a symmetric operator
    /// whose square-root factors invert each other.
    #[test]
    fn penalty_factor_consistency(
        seed in 0_u64..1000,
        p in 2_usize..8,
        k in 1_usize..8,
    ) {
        let mut rng = transfer_risk_core::rng::stream_rng(778, seed);
        let b = transfer_risk_core::rng::standard_normal_matrix(p, k, &mut rng);
        let rep = Representation::from_matrix(b).unwrap();
        let params = RegularizationParams::new(0.7, 0.2, 1.3).unwrap();
        let pen = Penalty::build(&rep, &Regularization::Finite(params)).unwrap();
        let product = pen.gamma_sqrt_finite() * pen.gamma_inv_sqrt();
        let gap = (product - DMatrix::<f64>::identity(p, p)).amax();
        prop_assert!(gap <= 1e-9);
    }
}
