//! Experiment configuration schema.
//!
//! Configs are TOML by default; a file ending in `.json` is parsed as JSON
//! with the same structure. Unknown keys are rejected everywhere so typos
//! fail loudly before any compute starts.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSpec,
    pub experiment: Experiment,
}

/// Ground truth of the synthetic problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    /// Covariate dimension.
    pub p: usize,
    /// Number of source tasks.
    pub q: usize,
    /// Downstream sample count (grids may override it).
    pub n: usize,
    /// Width of learned representations; defaults to `p`.
    #[serde(default)]
    pub k: Option<usize>,
    /// Label-noise variance.
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    /// Signal-to-noise target; the task-prior scale is calibrated to it.
    #[serde(default = "default_snr")]
    pub snr: f64,
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub ground_truth: GroundTruthSpec,
}

fn default_sigma2() -> f64 {
    1.0
}

fn default_snr() -> f64 {
    10.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovarianceSpec {
    /// `Sigma_ij = rho^|i-j|`.
    Ar1 { rho: f64 },
    /// `(1/m) W W^T + jitter I` with a `p x m` standard normal `W`.
    Wishart { m: usize, jitter: f64 },
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GroundTruthSpec {
    /// Columns drawn independently from `N(0, Sigma_B)` with AR(1)
    /// column covariance.
    GaussianAr1 { rho: f64 },
    /// `B B^T` is an orthogonal projection (identity when `q >= p`).
    Orthonormal,
}

impl Default for GroundTruthSpec {
    fn default() -> Self {
        GroundTruthSpec::GaussianAr1 { rho: 0.5 }
    }
}

/// Downstream predictor specification.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PredictorSpec {
    /// Plain ridgeless predictor, no featurization.
    Rp,
    /// Ground-truth featurization with fixed regularization.
    OfpFixed {
        lambda_alpha: f64,
        lambda_beta: f64,
        lambda: f64,
    },
    /// Ground-truth featurization, regularization tuned against the
    /// averaged objective.
    Ofp,
    /// Representation and regularization optimized end to end.
    Eep {
        #[serde(default)]
        width: Option<usize>,
    },
    /// Explicit representation choice with fixed regularization.
    Explicit {
        representation: ExplicitRepresentation,
        lambda_alpha: f64,
        lambda_beta: f64,
        lambda: f64,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ExplicitRepresentation {
    Identity,
    GroundTruth,
}

impl PredictorSpec {
    pub fn label(&self) -> &'static str {
        match self {
            PredictorSpec::Rp => "rp",
            PredictorSpec::OfpFixed { .. } => "ofp-fixed",
            PredictorSpec::Ofp => "ofp",
            PredictorSpec::Eep { .. } => "eep",
            PredictorSpec::Explicit { .. } => "explicit",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Avg,
    Worst,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    N,
    M,
    K,
    Q,
    Snr,
    Rho,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    /// Monte Carlo vs exact risk across a sample-count grid.
    RiskCurve {
        n_grid: Vec<usize>,
        replicates: usize,
        predictors: Vec<PredictorSpec>,
    },
    /// Predictor comparison along one problem axis.
    Ablation {
        axis: AblationAxis,
        values: Vec<f64>,
        predictors: Vec<PredictorSpec>,
        /// Task draws behind the error bars.
        #[serde(default = "default_draws")]
        draws: usize,
        #[serde(default)]
        optimizer: OptimizerSettings,
    },
    /// Spectrum-only representation design.
    Spectrum {
        objective: ObjectiveKind,
        /// Task-ball radius (worst objective).
        #[serde(default = "default_radius")]
        radius: f64,
    },
    /// End-to-end optimization of the representation.
    FullOpt {
        objective: ObjectiveKind,
        #[serde(default)]
        width: Option<usize>,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        optimizer: OptimizerSettings,
    },
    /// Alignment heat maps of an optimized representation.
    Heatmap {
        #[serde(default)]
        width: Option<usize>,
        #[serde(default)]
        optimizer: OptimizerSettings,
    },
    /// Pretraining sample-complexity sweep.
    Upstream {
        n_pre_grid: Vec<usize>,
        seeds: u64,
        noise_variance: f64,
        /// Penalty the objective is evaluated under.
        predictor: PredictorSpec,
    },
    /// Task-risk concentration around the averaged objective.
    Concentration {
        q_grid: Vec<usize>,
        draws: usize,
        predictor: PredictorSpec,
    },
}

fn default_draws() -> usize {
    200
}

fn default_radius() -> f64 {
    1.0
}

/// Optimizer knobs shared by the end-to-end runs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_episodes")]
    pub max_episodes: usize,
}

fn default_step() -> f64 {
    1e-3
}

fn default_episodes() -> usize {
    400
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            step_size: default_step(),
            max_episodes: default_episodes(),
        }
    }
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::RiskCurve { .. } => "risk-curve",
            Experiment::Ablation { .. } => "ablation",
            Experiment::Spectrum { .. } => "spectrum",
            Experiment::FullOpt { .. } => "full-opt",
            Experiment::Heatmap { .. } => "heatmap",
            Experiment::Upstream { .. } => "upstream",
            Experiment::Concentration { .. } => "concentration",
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = if path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false)
        {
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        let inst = &self.instance;
        if inst.p == 0 || inst.q == 0 || inst.n == 0 {
            return Err(CliError::Config(
                "dimensions p, q, n must be positive".into(),
            ));
        }
        if inst.sigma2 <= 0.0 {
            return Err(CliError::Config("sigma2 must be positive".into()));
        }
        if inst.snr < 0.0 {
            return Err(CliError::Config("snr must be non-negative".into()));
        }
        if let CovarianceSpec::Ar1 { rho } = inst.covariance {
            if rho.abs() >= 1.0 {
                return Err(CliError::Config("|rho| must be below 1".into()));
            }
        }
        match &self.experiment {
            Experiment::RiskCurve {
                n_grid,
                replicates,
                predictors,
            } => {
                if n_grid.is_empty() || predictors.is_empty() {
                    return Err(CliError::Config(
                        "risk-curve needs a non-empty n_grid and predictor list".into(),
                    ));
                }
                if *replicates < 2 {
                    return Err(CliError::Config("at least 2 replicates required".into()));
                }
            }
            Experiment::Ablation {
                values, predictors, ..
            } => {
                if values.is_empty() || predictors.is_empty() {
                    return Err(CliError::Config(
                        "ablation needs values and predictors".into(),
                    ));
                }
            }
            Experiment::Upstream {
                n_pre_grid, seeds, ..
            } => {
                if n_pre_grid.len() < 2 || *seeds == 0 {
                    return Err(CliError::Config(
                        "upstream needs at least two grid points and one seed".into(),
                    ));
                }
            }
            Experiment::Concentration { q_grid, draws, .. } if q_grid.is_empty() || *draws < 2 => {
                return Err(CliError::Config(
                    "concentration needs a q grid and at least two draws".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}
