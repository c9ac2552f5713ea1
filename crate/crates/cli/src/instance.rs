//! Builds problem instances and realized predictors from config specs.
//!
//! Randomness is organized in fixed streams of the run seed so that every
//! artifact is reproducible: stream 0 draws the covariance, stream 1 the
//! ground-truth representation; optimizer inits and task draws get their own
//! streams from the runners.

use nalgebra::DMatrix;
use transfer_risk_core::full_opt::{
    optimize, optimize_ofp, ObjectiveMode, OptimizerConfig, PretrainingObjective, TraceRow,
};
use transfer_risk_core::model::{
    CovarianceModel, CovarianceSpec as CoreCovarianceSpec, GroundTruthRepresentation, TaskModel,
};
use transfer_risk_core::penalty::{
    Penalty, Regularization, RegularizationParams, Representation,
};
use transfer_risk_core::rng::stream_rng;

use crate::config::{
    CovarianceSpec, ExplicitRepresentation, GroundTruthSpec, InstanceSpec, OptimizerSettings,
    PredictorSpec,
};
use crate::error::{CliError, CliResult};

/// A fully materialized problem instance.
pub struct Instance {
    pub covariance: CovarianceModel,
    pub ground_truth: GroundTruthRepresentation,
    pub task: TaskModel,
    pub n: usize,
    pub width: usize,
    pub sigma2: f64,
}

impl Instance {
    pub fn p(&self) -> usize {
        self.covariance.dim()
    }

    pub fn q(&self) -> usize {
        self.ground_truth.tasks()
    }

    pub fn scaled_prior(&self) -> DMatrix<f64> {
        self.task.scaled_prior()
    }
}

pub fn build_covariance(
    spec: &CovarianceSpec,
    p: usize,
    seed: u64,
) -> CliResult<CovarianceModel> {
    let core_spec = match spec {
        CovarianceSpec::Ar1 { rho } => CoreCovarianceSpec::Ar1 { rho: *rho, p },
        CovarianceSpec::Wishart { m, jitter } => CoreCovarianceSpec::WishartJitter {
            p,
            m: *m,
            jitter: *jitter,
        },
        CovarianceSpec::Identity => CoreCovarianceSpec::Identity { p },
    };
    Ok(CovarianceModel::generate(
        &core_spec,
        &mut stream_rng(seed, 0),
    )?)
}

pub fn build_ground_truth(
    spec: &GroundTruthSpec,
    p: usize,
    q: usize,
    seed: u64,
    stream: u64,
) -> CliResult<GroundTruthRepresentation> {
    let mut rng = stream_rng(seed, stream);
    Ok(match spec {
        GroundTruthSpec::GaussianAr1 { rho } => {
            let column_cov = CovarianceModel::ar1(*rho, p)?;
            GroundTruthRepresentation::sample(p, q, &column_cov, &mut rng)?
        }
        GroundTruthSpec::Orthonormal => {
            GroundTruthRepresentation::sample_orthonormal(p, q, &mut rng)?
        }
    })
}

/// Builds the instance with the task-prior scale calibrated to the SNR
/// target (an SNR of zero turns the signal off).
pub fn build_instance(spec: &InstanceSpec, seed: u64) -> CliResult<Instance> {
    let covariance = build_covariance(&spec.covariance, spec.p, seed)?;
    let ground_truth = build_ground_truth(&spec.ground_truth, spec.p, spec.q, seed, 1)?;
    let prior_shape = DMatrix::identity(spec.q, spec.q);
    let scale =
        TaskModel::calibrate_snr(&ground_truth, &prior_shape, spec.sigma2, spec.snr)?;
    let task = TaskModel::new(prior_shape, scale, spec.sigma2)?;
    Ok(Instance {
        covariance,
        ground_truth,
        task,
        n: spec.n,
        width: spec.k.unwrap_or(spec.p),
        sigma2: spec.sigma2,
    })
}

/// A predictor made concrete: a representation plus regularization for data
/// fits, and the induced penalty for the exact formulas.
pub struct RealizedPredictor {
    pub label: String,
    pub representation: Representation,
    pub regularization: Regularization,
    pub penalty: Penalty,
    /// Optimizer trace when the predictor was tuned.
    pub trace: Vec<TraceRow>,
}

/// Realizes a predictor spec on an instance. Optimizing predictors draw
/// their initialization from `seed` (deterministically).
pub fn realize_predictor(
    spec: &PredictorSpec,
    instance: &Instance,
    n: usize,
    settings: &OptimizerSettings,
    seed: u64,
) -> CliResult<RealizedPredictor> {
    let p = instance.p();
    match spec {
        PredictorSpec::Rp => {
            let representation = Representation::identity(p);
            let regularization = Regularization::NoFeaturization { lambda_beta: 1.0 };
            let penalty = Penalty::build(&representation, &regularization)?;
            Ok(RealizedPredictor {
                label: spec.label().into(),
                representation,
                regularization,
                penalty,
                trace: Vec::new(),
            })
        }
        PredictorSpec::OfpFixed {
            lambda_alpha,
            lambda_beta,
            lambda,
        } => {
            let params = RegularizationParams::new(*lambda_alpha, *lambda_beta, *lambda)?;
            let representation =
                Representation::from_matrix(instance.ground_truth.matrix().clone())?;
            let regularization = Regularization::Finite(params);
            let penalty = Penalty::build(&representation, &regularization)?;
            Ok(RealizedPredictor {
                label: spec.label().into(),
                representation,
                regularization,
                penalty,
                trace: Vec::new(),
            })
        }
        PredictorSpec::Explicit {
            representation,
            lambda_alpha,
            lambda_beta,
            lambda,
        } => {
            let params = RegularizationParams::new(*lambda_alpha, *lambda_beta, *lambda)?;
            let matrix = match representation {
                ExplicitRepresentation::Identity => DMatrix::identity(p, p),
                ExplicitRepresentation::GroundTruth => instance.ground_truth.matrix().clone(),
            };
            let representation = Representation::from_matrix(matrix)?;
            let regularization = Regularization::Finite(params);
            let penalty = Penalty::build(&representation, &regularization)?;
            Ok(RealizedPredictor {
                label: spec.label().into(),
                representation,
                regularization,
                penalty,
                trace: Vec::new(),
            })
        }
        PredictorSpec::Ofp => {
            let objective = PretrainingObjective::averaged(
                &instance.covariance,
                instance.ground_truth.matrix(),
                instance.scaled_prior(),
                instance.sigma2,
                n,
            );
            let mut config = OptimizerConfig::new(ObjectiveMode::Averaged, instance.q());
            config.step_size = settings.step_size;
            config.max_episodes = settings.max_episodes;
            config.seed = seed;
            let result = optimize_ofp(&config, &objective).map_err(CliError::from)?;
            let representation = Representation::from_matrix(result.representation)?;
            let regularization = Regularization::Finite(result.params);
            let penalty = Penalty::build(&representation, &regularization)?;
            Ok(RealizedPredictor {
                label: spec.label().into(),
                representation,
                regularization,
                penalty,
                trace: result.trace,
            })
        }
        PredictorSpec::Eep { width } => {
            let objective = PretrainingObjective::averaged(
                &instance.covariance,
                instance.ground_truth.matrix(),
                instance.scaled_prior(),
                instance.sigma2,
                n,
            );
            let k = width.unwrap_or(instance.width);
            let mut config = OptimizerConfig::new(ObjectiveMode::Averaged, k);
            config.step_size = settings.step_size;
            config.max_episodes = settings.max_episodes;
            config.seed = seed;
            let result = optimize(&config, &objective, None).map_err(CliError::from)?;
            let representation = Representation::from_matrix(result.representation)?;
            let regularization = Regularization::Finite(result.params);
            let penalty = Penalty::build(&representation, &regularization)?;
            Ok(RealizedPredictor {
                label: spec.label().into(),
                representation,
                regularization,
                penalty,
                trace: result.trace,
            })
        }
    }
}
