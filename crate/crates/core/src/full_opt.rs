//! Gradient-based optimization of the full representation and
//! regularization against the prior-averaged or worst-case asymptotic risk.
//!
//! The forward pass chains eigendecomposition of `B B^T`, the shrink
//! profile, whitening, the fixed point `b0`, and the risk formula. The
//! backward pass is fully analytic:
//!
//! - the fixed point is differentiated implicitly,
//!   `db0/dt_i = -(b0 x_i^2) / sum_j t_j x_j^2` with `x_i = 1/(1 + t_i b0)`;
//! - both eigendecompositions use the symmetric backward rule
//!   `dL/dA = W [diag(dL/dt) + F o skew(W^T dL/dW)] W^T` with
//!   `F_ij = (t_j - t_i)^{-1}` and `skew(C) = (C - C^T)/2` (only rotations
//!   of the eigenbasis carry information; the radial part of the raw
//!   eigenvector gradient is annihilated by orthogonality);
//! - `Gamma^{+-1/2}` are spectral functions of `B B^T`, so their adjoints
//!   reduce to per-direction weights on the same eigenbasis;
//! - the worst-case objective differentiates the top eigenvalue through its
//!   eigenvector held fixed.
//!
//! Degenerate eigenvalue clusters make the `F` factor singular. Structural
//! clusters (the zero block of `B B^T` for `k < p`, the null space of the
//! whitened covariance) never receive perturbations along the parameter
//! manifold and their couplings vanish identically, so those entries are
//! dropped. Accidental near-ties trigger one deterministic symmetric jitter
//! of relative size 1e-10 before the factorization; a significant coupling
//! still sitting on a vanishing gap is reported as an undefined gradient.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::asymptotics::solve_b0_from_eigenvalues;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{CovarianceModel, GroundTruthRepresentation};
use crate::penalty::{
    shrink_profile, shrink_profile_deriv, shrink_profile_reg_grad, RegularizationParams,
};
use crate::rng::stream_rng;

/// Gap threshold (relative to the spectral scale) below which a cluster
/// counts as degenerate and jitter is applied.
pub const GAP_JITTER_THRESHOLD: f64 = 1e-8;

/// Relative jitter magnitude.
pub const JITTER_SCALE: f64 = 1e-10;

/// Gap threshold below which the backward `F` factor is zeroed.
const GAP_FLOOR: f64 = 1e-12;

/// Seed of the deterministic jitter stream.
const JITTER_SEED: u64 = 0x6a17_7e5e;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// Minimize the prior-averaged risk.
    Averaged,
    /// Minimize the worst-case risk over the task ball.
    Worst,
}

/// Everything the objective needs besides the learnable parameters.
#[derive(Debug, Clone)]
pub struct PretrainingObjective<'a> {
    pub covariance: &'a CovarianceModel,
    pub bstar: &'a DMatrix<f64>,
    /// Scaled `q x q` task prior (averaged mode).
    pub prior: DMatrix<f64>,
    pub sigma2: f64,
    pub n: usize,
    /// Task-ball radius (worst mode).
    pub radius: f64,
    pub mode: ObjectiveMode,
    /// `B* prior B*^T`, precomputed for the averaged mode.
    signal: DMatrix<f64>,
}

impl<'a> PretrainingObjective<'a> {
    pub fn averaged(
        covariance: &'a CovarianceModel,
        bstar: &'a DMatrix<f64>,
        prior: DMatrix<f64>,
        sigma2: f64,
        n: usize,
    ) -> Self {
        let signal = bstar * &prior * bstar.transpose();
        Self {
            covariance,
            bstar,
            prior,
            sigma2,
            n,
            radius: 0.0,
            mode: ObjectiveMode::Averaged,
            signal,
        }
    }

    pub fn worst(
        covariance: &'a CovarianceModel,
        bstar: &'a DMatrix<f64>,
        sigma2: f64,
        n: usize,
        radius: f64,
    ) -> Self {
        Self {
            covariance,
            bstar,
            prior: DMatrix::zeros(bstar.ncols(), bstar.ncols()),
            sigma2,
            n,
            radius,
            mode: ObjectiveMode::Worst,
            signal: DMatrix::zeros(0, 0),
        }
    }

    fn p(&self) -> usize {
        self.covariance.dim()
    }
}

/// Objective value plus analytic gradients and fixed-point diagnostics.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub value: f64,
    pub grad_representation: DMatrix<f64>,
    /// Gradient in `(lambda_alpha, lambda_beta, lambda)`.
    pub grad_regularization: [f64; 3],
    /// `dL/db0`.
    pub grad_b0: f64,
    /// Total derivatives `dL/dt_i` (zero outside the support).
    pub grad_t: DVector<f64>,
    /// Implicit sensitivities `db0/dt_i` (zero outside the support).
    pub db0_dt: DVector<f64>,
}

struct Forward {
    d_sq: DVector<f64>,
    q_basis: DMatrix<f64>,
    weights: DVector<f64>,
    gamma_inv_sqrt: DMatrix<f64>,
    gamma_sqrt: DMatrix<f64>,
    t: DVector<f64>,
    w_basis: DMatrix<f64>,
    support: usize,
    b0: f64,
    x: Vec<f64>,
    variance_factor: f64,
    bias: f64,
    value: f64,
    /// Averaged: `quad_i = w_i^T Y C Y w_i / q`; worst:
    /// `quad_i = radius * s_i^2` with `s_i = a^T Y w_i`, `a = B* v`.
    /// Either way `bias = sum_i t_i x_i^2 quad_i`.
    quad: Vec<f64>,
    /// Signed overlaps `s_i` (worst mode only).
    overlaps: Vec<f64>,
    /// `Y C Y` (averaged mode only).
    phi: DMatrix<f64>,
    /// `a = B* v` (worst mode only).
    top_dir: DVector<f64>,
}

fn jitter_matrix(p: usize, scale: f64, stream: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(JITTER_SEED, stream);
    let raw = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    let sym = linalg::symmetrize(&raw);
    // Normalize by the max row sum so the spectral perturbation is ~scale.
    let norm = sym
        .row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    sym * (scale / norm)
}

/// Smallest consecutive gap among the `active` leading eigenvalues (sorted
/// descending), including the distance of the last active one to zero when a
/// structural zero block follows.
fn min_active_gap(values: &DVector<f64>, active: usize) -> f64 {
    let mut min_gap = f64::INFINITY;
    for i in 0..active.saturating_sub(1) {
        min_gap = min_gap.min((values[i] - values[i + 1]).abs());
    }
    if active > 0 && active < values.len() {
        min_gap = min_gap.min(values[active - 1].abs());
    }
    min_gap
}

/// Symmetric eigendecomposition with the jitter-and-retry policy.
fn eig_with_jitter(
    matrix: &DMatrix<f64>,
    active: usize,
    stream: u64,
) -> (DVector<f64>, DMatrix<f64>) {
    let (values, vectors) = linalg::sym_eig_desc(matrix);
    let scale = values[0]
        .abs()
        .max(values[values.len() - 1].abs())
        .max(1e-300);
    if min_active_gap(&values, active) >= GAP_JITTER_THRESHOLD * scale {
        return (values, vectors);
    }
    let jittered = matrix + jitter_matrix(matrix.nrows(), JITTER_SCALE * scale, stream);
    linalg::sym_eig_desc(&jittered)
}

fn forward_pass(
    bhat: &DMatrix<f64>,
    params: &RegularizationParams,
    objective: &PretrainingObjective,
    with_jitter: bool,
) -> Result<Forward> {
    let p = objective.p();
    if bhat.nrows() != p {
        return Err(Error::DimensionMismatch(alloc::format!(
            "representation has {} rows, covariance dim is {p}",
            bhat.nrows()
        )));
    }
    let gram = bhat * bhat.transpose();
    let (d_sq, q_basis) = if with_jitter {
        let probe = linalg::sym_eig_desc(&gram).0;
        let top = probe[0].max(0.0);
        let active = probe.iter().filter(|&&v| v > 1e-12 * top.max(1e-300)).count();
        eig_with_jitter(&gram, active, 1)
    } else {
        linalg::sym_eig_desc(&gram)
    };
    let d_sq = d_sq.map(|v| v.max(0.0));

    let weights = DVector::from_iterator(p, d_sq.iter().map(|&d| shrink_profile(d, params)));
    let gamma_inv_sqrt =
        &q_basis * DMatrix::from_diagonal(&weights.map(|w| 1.0 / w.sqrt())) * q_basis.transpose();
    let gamma_sqrt =
        &q_basis * DMatrix::from_diagonal(&weights.map(|w| w.sqrt())) * q_basis.transpose();

    let whitened = &gamma_inv_sqrt * objective.covariance.matrix() * &gamma_inv_sqrt;
    let support = objective.covariance.rank();
    let (t, w_basis) = if with_jitter {
        eig_with_jitter(&whitened, support, 2)
    } else {
        linalg::sym_eig_desc(&whitened)
    };
    let t = t.map(|v| v.max(0.0));

    let b0 = solve_b0_from_eigenvalues(&t.as_slice()[..support], objective.n)?.value;
    let x: Vec<f64> = (0..support).map(|i| 1.0 / (1.0 + t[i] * b0)).collect();
    let s2: f64 = x.iter().map(|&v| v * v).sum();
    let nf = objective.n as f64;
    let hf = support as f64;
    let variance_factor = (2.0 * nf - hf + s2) / (hf - nf - s2);

    let (quad, overlaps, phi, top_dir) = match objective.mode {
        ObjectiveMode::Averaged => {
            let phi = &gamma_sqrt * &objective.signal * &gamma_sqrt;
            let q = objective.bstar.ncols() as f64;
            let quad: Vec<f64> = (0..support)
                .map(|i| {
                    let w = w_basis.column(i);
                    ((&phi) * w).dot(&w) / q
                })
                .collect();
            (quad, Vec::new(), phi, DVector::zeros(0))
        }
        ObjectiveMode::Worst => {
            let lifted = objective.bstar.transpose() * &gamma_sqrt; // q x p
            let q = objective.bstar.ncols();
            let mut moment = DMatrix::zeros(q, q);
            let mut z_cols: Vec<DVector<f64>> = Vec::with_capacity(support);
            for (i, &xi) in x.iter().enumerate() {
                let z = &lifted * w_basis.column(i);
                moment += t[i] * xi * xi * &z * z.transpose();
                z_cols.push(z);
            }
            // A tied top eigenvalue of the moment matrix gets the same
            // jitter treatment as the main factorizations.
            let (m_values, m_vectors) = if with_jitter {
                eig_with_jitter(&moment, 2.min(q), 3)
            } else {
                linalg::sym_eig_desc(&moment)
            };
            let top: DVector<f64> = m_vectors.column(0).into_owned();
            let _ = m_values;
            let overlaps: Vec<f64> = z_cols.iter().map(|z| z.dot(&top)).collect();
            let quad: Vec<f64> = overlaps
                .iter()
                .map(|&s| objective.radius * s * s)
                .collect();
            let top_dir = objective.bstar * top;
            (quad, overlaps, DMatrix::zeros(0, 0), top_dir)
        }
    };

    let weighted: Vec<f64> = (0..support).map(|i| t[i] * x[i] * x[i] * quad[i]).collect();
    let bias = linalg::pairwise_sum(&weighted);
    let value = bias * (1.0 + variance_factor) + objective.sigma2 * variance_factor;

    Ok(Forward {
        d_sq,
        q_basis,
        weights,
        gamma_inv_sqrt,
        gamma_sqrt,
        t,
        w_basis,
        support,
        b0,
        x,
        variance_factor,
        bias,
        value,
        quad,
        overlaps,
        phi,
        top_dir,
    })
}

/// Objective value only.
pub fn objective_forward(
    bhat: &DMatrix<f64>,
    params: &RegularizationParams,
    objective: &PretrainingObjective,
) -> Result<f64> {
    Ok(forward_pass(bhat, params, objective, false)?.value)
}

/// Backward rule for a symmetric eigendecomposition `A = W diag(t) W^T`.
/// Entries on gaps below the floor are dropped; a significant coupling on a
/// vanishing gap makes the gradient undefined.
fn eig_backward(
    t: &DVector<f64>,
    w: &DMatrix<f64>,
    grad_t: &DVector<f64>,
    grad_w: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = t.len();
    let scale = t[0].abs().max(t[p - 1].abs()).max(1e-300);
    let coupling = w.transpose() * grad_w;
    let coupling_scale = linalg::max_abs(&coupling).max(1e-300);
    let mut inner = DMatrix::from_diagonal(grad_t);
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            let gap = t[j] - t[i];
            let skew = 0.5 * (coupling[(i, j)] - coupling[(j, i)]);
            if gap.abs() <= GAP_FLOOR * scale {
                if skew.abs() > 1e-7 * coupling_scale {
                    return Err(Error::DegenerateEigenvalues { gap: gap.abs() });
                }
                continue;
            }
            inner[(i, j)] += skew / gap;
        }
    }
    Ok(w * inner * w.transpose())
}

fn gradient_from_forward(
    bhat: &DMatrix<f64>,
    fwd: &Forward,
    params: &RegularizationParams,
    objective: &PretrainingObjective,
) -> Result<GradientBundle> {
    let p = objective.p();
    let h = fwd.support;
    let nf = objective.n as f64;
    let hf = h as f64;
    let q = objective.bstar.ncols() as f64;

    // Scalar heads: both objectives read bias (1 + V) + sigma^2 V.
    let dl_dv = fwd.bias + objective.sigma2;
    let dl_dbias = 1.0 + fwd.variance_factor;
    let s2: f64 = fwd.x.iter().map(|&v| v * v).sum();
    let dv_ds2 = nf / ((hf - nf - s2) * (hf - nf - s2));

    let mut dl_dx = alloc::vec![0.0_f64; h];
    let mut dl_dt_partial = alloc::vec![0.0_f64; h];
    for i in 0..h {
        let xi = fwd.x[i];
        let ti = fwd.t[i];
        dl_dx[i] = dl_dv * dv_ds2 * 2.0 * xi + dl_dbias * 2.0 * ti * xi * fwd.quad[i];
        dl_dt_partial[i] = dl_dbias * xi * xi * fwd.quad[i];
    }

    // Implicit fixed-point coupling.
    let denom: f64 = (0..h).map(|i| fwd.t[i] * fwd.x[i] * fwd.x[i]).sum();
    let grad_b0: f64 = (0..h)
        .map(|i| dl_dx[i] * (-fwd.t[i] * fwd.x[i] * fwd.x[i]))
        .sum();
    let mut db0_dt = DVector::zeros(p);
    let mut grad_t = DVector::zeros(p);
    for i in 0..h {
        let xi = fwd.x[i];
        db0_dt[i] = -fwd.b0 * xi * xi / denom;
        grad_t[i] = dl_dt_partial[i] + dl_dx[i] * (-fwd.b0 * xi * xi) + grad_b0 * db0_dt[i];
    }

    // Eigenvector gradients of the whitened matrix, and the Euclidean
    // gradient with respect to Gamma^{1/2}.
    let mut grad_w = DMatrix::zeros(p, p);
    let grad_y: DMatrix<f64> = match objective.mode {
        ObjectiveMode::Averaged => {
            for i in 0..h {
                let coeff = dl_dbias * 2.0 * fwd.t[i] * fwd.x[i] * fwd.x[i] / q;
                let col = &fwd.phi * fwd.w_basis.column(i);
                grad_w.set_column(i, &(coeff * col));
            }
            let coeffs = DVector::from_iterator(
                p,
                (0..p).map(|i| {
                    if i < h {
                        dl_dbias * fwd.t[i] * fwd.x[i] * fwd.x[i] / q
                    } else {
                        0.0
                    }
                }),
            );
            let projector =
                &fwd.w_basis * DMatrix::from_diagonal(&coeffs) * fwd.w_basis.transpose();
            // dL/dY = P Y C + C Y P with P = sum coeff_i w_i w_i^T.
            let y_c = &fwd.gamma_sqrt * &objective.signal; // Y C
            &projector * &y_c + y_c.transpose() * &projector
        }
        ObjectiveMode::Worst => {
            let lifted_top = &fwd.gamma_sqrt * &fwd.top_dir; // Y a
            let mut g_vec = DVector::zeros(p);
            for i in 0..h {
                let coeff = dl_dbias
                    * objective.radius
                    * 2.0
                    * fwd.t[i]
                    * fwd.x[i]
                    * fwd.x[i]
                    * fwd.overlaps[i];
                grad_w.set_column(i, &(coeff * &lifted_top));
                g_vec += coeff * fwd.w_basis.column(i).into_owned();
            }
            // d/dY of sum t x^2 (a^T Y w)^2 collects rank-one terms a g^T.
            &fwd.top_dir * g_vec.transpose()
        }
    };

    // Backward through the whitened eigendecomposition, then S = G Sigma G.
    let grad_s = eig_backward(&fwd.t, &fwd.w_basis, &grad_t, &grad_w)?;
    let sigma_g = objective.covariance.matrix() * &fwd.gamma_inv_sqrt;
    let grad_g = &grad_s * sigma_g.transpose() + &sigma_g * &grad_s;

    // Chain to the penalty eigenvalues and eigenvectors:
    // G = sum r_i^{-1/2} q_i q_i^T and Y = sum r_i^{1/2} q_i q_i^T.
    let sym_grad_y = &grad_y + grad_y.transpose();
    let grad_g_q = &grad_g * &fwd.q_basis;
    let sym_grad_y_q = &sym_grad_y * &fwd.q_basis;
    let grad_y_q = &grad_y * &fwd.q_basis;
    let mut grad_r = DVector::zeros(p);
    let mut grad_q = DMatrix::zeros(p, p);
    for i in 0..p {
        let qi = fwd.q_basis.column(i);
        let r = fwd.weights[i];
        let gy = grad_y_q.column(i).dot(&qi);
        let gg = grad_g_q.column(i).dot(&qi);
        grad_r[i] = 0.5 / r.sqrt() * gy - 0.5 / (r * r.sqrt()) * gg;
        let col = 2.0 / r.sqrt() * grad_g_q.column(i) + r.sqrt() * sym_grad_y_q.column(i);
        grad_q.set_column(i, &col);
    }

    // Backward through the representation eigendecomposition.
    let grad_d_sq = DVector::from_iterator(
        p,
        (0..p).map(|i| grad_r[i] * shrink_profile_deriv(fwd.d_sq[i], params)),
    );
    let grad_gram = eig_backward(&fwd.d_sq, &fwd.q_basis, &grad_d_sq, &grad_q)?;
    let grad_representation = 2.0 * &grad_gram * bhat;

    let mut grad_regularization = [0.0_f64; 3];
    for i in 0..p {
        let reg_grad = shrink_profile_reg_grad(fwd.d_sq[i], params);
        for axis in 0..3 {
            grad_regularization[axis] += grad_r[i] * reg_grad[axis];
        }
    }

    Ok(GradientBundle {
        value: fwd.value,
        grad_representation,
        grad_regularization,
        grad_b0,
        grad_t,
        db0_dt,
    })
}

/// Analytic gradient of the objective in `(B, lambda)`.
pub fn objective_gradient(
    bhat: &DMatrix<f64>,
    params: &RegularizationParams,
    objective: &PretrainingObjective,
) -> Result<GradientBundle> {
    let fwd = forward_pass(bhat, params, objective, true)?;
    gradient_from_forward(bhat, &fwd, params, objective)
}

/// Central finite differences over every coordinate; the slow oracle.
pub fn fd_gradient(
    bhat: &DMatrix<f64>,
    params: &RegularizationParams,
    objective: &PretrainingObjective,
    step: f64,
) -> Result<GradientBundle> {
    let value = objective_forward(bhat, params, objective)?;
    let mut grad_representation = DMatrix::zeros(bhat.nrows(), bhat.ncols());
    for r in 0..bhat.nrows() {
        for c in 0..bhat.ncols() {
            let mut hi = bhat.clone();
            let mut lo = bhat.clone();
            hi[(r, c)] += step;
            lo[(r, c)] -= step;
            grad_representation[(r, c)] = (objective_forward(&hi, params, objective)?
                - objective_forward(&lo, params, objective)?)
                / (2.0 * step);
        }
    }
    let base = params.as_array();
    let mut grad_regularization = [0.0_f64; 3];
    for axis in 0..3 {
        let mut hi = base;
        let mut lo = base;
        hi[axis] += step;
        lo[axis] -= step;
        let hi = RegularizationParams::new(hi[0], hi[1], hi[2])?;
        let lo = RegularizationParams::new(lo[0], lo[1], lo[2])?;
        grad_regularization[axis] = (objective_forward(bhat, &hi, objective)?
            - objective_forward(bhat, &lo, objective)?)
            / (2.0 * step);
    }
    Ok(GradientBundle {
        value,
        grad_representation,
        grad_regularization,
        grad_b0: f64::NAN,
        grad_t: DVector::zeros(0),
        db0_dt: DVector::zeros(0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub mode: ObjectiveMode,
    /// When false the representation stays frozen and only the
    /// regularization is learned.
    pub learn_representation: bool,
    /// Width `k` of the learned representation.
    pub width: usize,
    pub step_size: f64,
    pub max_episodes: usize,
    pub episode_len: usize,
    /// Relative improvement below which an episode counts as stalled.
    pub improvement_tol: f64,
    /// Stalled episodes tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(mode: ObjectiveMode, width: usize) -> Self {
        Self {
            mode,
            learn_representation: true,
            width,
            step_size: 1e-3,
            max_episodes: 400,
            episode_len: 50,
            improvement_tol: 1e-3,
            patience: 7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub episode: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub representation: DMatrix<f64>,
    pub params: RegularizationParams,
    pub value: f64,
    pub trace: Vec<TraceRow>,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    fn new(dim: usize) -> Self {
        Self {
            m: alloc::vec![0.0; dim],
            v: alloc::vec![0.0; dim],
            t: 0,
        }
    }

    fn update(&mut self, grad: &[f64], lr: f64, out: &mut [f64]) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..grad.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grad[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            out[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

fn params_from_log(log_reg: &[f64; 3]) -> RegularizationParams {
    RegularizationParams {
        lambda_alpha: log_reg[0].exp(),
        lambda_beta: log_reg[1].exp(),
        lambda: log_reg[2].exp(),
    }
}

/// Runs adaptive first-order minimization of the objective.
///
/// The regularization is kept positive through a log reparametrization.
/// Steps are grouped in episodes; the run stops when the best value has not
/// improved by more than `improvement_tol` (relatively) for `patience`
/// consecutive episodes. A non-finite loss restores the episode snapshot and
/// halves the step size, up to three times. Returns the best parameters
/// seen.
pub fn optimize(
    config: &OptimizerConfig,
    objective: &PretrainingObjective,
    init: Option<(DMatrix<f64>, RegularizationParams)>,
) -> Result<OptimizeResult> {
    let p = objective.p();
    let k = config.width;
    let mut rng = stream_rng(config.seed, 0);
    let (mut bhat, mut log_reg) = match init {
        Some((b, params)) => {
            let a = params.as_array();
            (b, [a[0].ln(), a[1].ln(), a[2].ln()])
        }
        None => {
            let bound = 1.0 / (k as f64).sqrt();
            let b = DMatrix::from_fn(p, k, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * bound);
            let s3 = 3.0_f64.sqrt();
            let reg = [
                (rng.random::<f64>() * 2.0 - 1.0) * s3,
                (rng.random::<f64>() * 2.0 - 1.0) * s3,
                (rng.random::<f64>() * 2.0 - 1.0) * s3,
            ];
            (b, reg)
        }
    };

    let rep_dim = if config.learn_representation { p * k } else { 0 };
    let dim = rep_dim + 3;
    let mut adam = AdamState::new(dim);
    let mut lr = config.step_size;
    let mut trace = Vec::new();
    let mut best_value = f64::INFINITY;
    let mut best = (bhat.clone(), params_from_log(&log_reg));
    let mut reference = f64::INFINITY;
    let mut stalled = 0_usize;
    let mut restarts = 0_usize;
    let mut step_counter = 0_usize;

    'episodes: for episode in 0..config.max_episodes {
        let snapshot = (
            bhat.clone(),
            log_reg,
            AdamState {
                m: adam.m.clone(),
                v: adam.v.clone(),
                t: adam.t,
            },
            step_counter,
        );
        let mut failed = false;
        for _ in 0..config.episode_len {
            let params = params_from_log(&log_reg);
            let bundle = match objective_gradient(&bhat, &params, objective) {
                Ok(b) => b,
                Err(Error::DegenerateEigenvalues { .. }) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !bundle.value.is_finite() {
                failed = true;
                break;
            }
            if bundle.value < best_value {
                best_value = bundle.value;
                best = (bhat.clone(), params);
            }

            // Flatten gradients; the regularization gradient is pulled back
            // through the log map.
            let mut grad = Vec::with_capacity(dim);
            if config.learn_representation {
                grad.extend(bundle.grad_representation.iter().copied());
            }
            for (g, omega) in bundle.grad_regularization.iter().zip(log_reg.iter()) {
                grad.push(g * omega.exp());
            }
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                failed = true;
                break;
            }
            step_counter += 1;
            trace.push(TraceRow {
                step: step_counter,
                episode,
                loss: bundle.value,
                grad_norm,
            });

            let mut flat = Vec::with_capacity(dim);
            if config.learn_representation {
                flat.extend(bhat.iter().copied());
            }
            flat.extend_from_slice(&log_reg);
            adam.update(&grad, lr, &mut flat);
            if config.learn_representation {
                for (dst, src) in bhat.iter_mut().zip(flat.iter()) {
                    *dst = *src;
                }
            }
            log_reg.copy_from_slice(&flat[rep_dim..]);
        }

        if failed {
            restarts += 1;
            if restarts > 3 {
                return Err(Error::Diverged(
                    "loss became non-finite after three step-size reductions".into(),
                ));
            }
            bhat = snapshot.0;
            log_reg = snapshot.1;
            adam = snapshot.2;
            step_counter = snapshot.3;
            lr *= 0.5;
            continue 'episodes;
        }

        // Episode-level stopping rule on the best value seen so far.
        if best_value < reference * (1.0 - config.improvement_tol) {
            reference = best_value;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= config.patience {
                break;
            }
        }
    }

    Ok(OptimizeResult {
        representation: best.0,
        params: best.1,
        value: best_value,
        trace,
    })
}

/// Tunes the regularization for a frozen ground-truth representation.
pub fn optimize_ofp(
    config: &OptimizerConfig,
    objective: &PretrainingObjective,
) -> Result<OptimizeResult> {
    let mut cfg = *config;
    cfg.learn_representation = false;
    cfg.width = objective.bstar.ncols();
    // Regularization starts from the same distribution as the end-to-end
    // runs; the representation is pinned to the ground truth.
    let mut rng = stream_rng(cfg.seed, 1);
    let s3 = 3.0_f64.sqrt();
    let reg = params_from_log(&[
        (rng.random::<f64>() * 2.0 - 1.0) * s3,
        (rng.random::<f64>() * 2.0 - 1.0) * s3,
        (rng.random::<f64>() * 2.0 - 1.0) * s3,
    ]);
    optimize(&cfg, objective, Some((objective.bstar.clone(), reg)))
}

/// Alignment diagnostics of a learned representation: overlaps with the
/// ground-truth feature eigenvectors, overlaps with the covariance
/// eigenvectors, and the learned spectrum.
pub fn heatmap_alignment(
    bhat: &DMatrix<f64>,
    ground_truth: &GroundTruthRepresentation,
    covariance: &CovarianceModel,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let gram = bhat * bhat.transpose();
    let (d_sq, q_basis) = linalg::sym_eig_desc(&gram);
    let feature_overlap = q_basis.transpose() * ground_truth.feature_eigenvectors();
    let covariance_overlap = q_basis.transpose() * covariance.eigenvectors();
    (feature_overlap, covariance_overlap, d_sq.map(|v| v.max(0.0)))
}
