//! Experiment implementations behind the subcommands.
//!
//! Every runner takes the parsed config, the run seed, and an output
//! directory; it writes `results.csv`, `summary.json` and `manifest.json`
//! (plus extra tables where noted). Grid points that land in an invalid
//! regime become rows with empty values and a `status` message; they never
//! abort a sweep. All parallel maps collect in index order and reduce
//! sequentially, so outputs are byte-identical for any `--threads`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::path::Path;

use transfer_risk_core::asymptotics::{
    averaged_objective, risk_components, whiten, worst_case_moment, AsymptoticReport,
};
use transfer_risk_core::full_opt::{
    heatmap_alignment, optimize, ObjectiveMode, OptimizerConfig, PretrainingObjective,
};
use transfer_risk_core::model::{sample_data, TaskModel};
use transfer_risk_core::montecarlo::{combine_replicates, sample_replicate, DecompositionEstimate};
use transfer_risk_core::penalty::Penalty;
use transfer_risk_core::predictor::{empirical_risk, fit};
use transfer_risk_core::rng::stream_rng;
use transfer_risk_core::spectrum_opt::{
    alignment_coefficients, minimize_bias_spectrum, minimize_variance_spectrum, solve_direct,
    solve_relaxed, SelectionRegime, SpectrumObjective,
};
use transfer_risk_core::upstream::scaling_experiment;

use crate::config::{
    AblationAxis, CovarianceSpec, Experiment, ExperimentConfig, ObjectiveKind,
    OptimizerSettings, PredictorSpec,
};
use crate::error::{CliError, CliResult};
use crate::instance::{build_ground_truth, build_instance, realize_predictor, Instance};
use crate::output::{fmt, OutputDir};

pub fn run(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    allowed_kinds: &[&str],
) -> CliResult<()> {
    let kind = config.experiment.kind();
    if !allowed_kinds.contains(&kind) {
        return Err(CliError::Config(format!(
            "this subcommand handles {allowed_kinds:?} configs, got kind = {kind}"
        )));
    }
    let dir = OutputDir::create(out)?;
    dir.write_manifest(config, seed)?;
    match &config.experiment {
        Experiment::RiskCurve {
            n_grid,
            replicates,
            predictors,
        } => {
            let with_mc = allowed_kinds.contains(&"risk-curve-mc");
            run_risk_curve(
                config, seed, &dir, n_grid, *replicates, predictors, with_mc,
            )
        }
        Experiment::Ablation {
            axis,
            values,
            predictors,
            draws,
            optimizer,
        } => run_ablation(config, seed, &dir, *axis, values, predictors, *draws, optimizer),
        Experiment::Spectrum { objective, radius } => {
            run_spectrum(config, seed, &dir, *objective, *radius)
        }
        Experiment::FullOpt {
            objective,
            width,
            radius,
            optimizer,
        } => run_full_opt(config, seed, &dir, *objective, *width, *radius, optimizer),
        Experiment::Heatmap { width, optimizer } => {
            run_heatmap(config, seed, &dir, *width, optimizer)
        }
        Experiment::Upstream {
            n_pre_grid,
            seeds,
            noise_variance,
            predictor,
        } => run_upstream(config, seed, &dir, n_pre_grid, *seeds, *noise_variance, predictor),
        Experiment::Concentration {
            q_grid,
            draws,
            predictor,
        } => run_concentration(config, seed, &dir, q_grid, *draws, predictor),
    }
}

const RISK_CURVE_HEADER: [&str; 13] = [
    "n", "predictor", "R_mc", "R_mc_se", "R_asy", "B_fg", "Vx_fg", "Vxe_fg", "Ve_fg", "B_asy",
    "VB_asy", "V_asy", "status",
];

#[allow(clippy::too_many_arguments)]
fn run_risk_curve(
    config: &ExperimentConfig,
    seed: u64,
    dir: &OutputDir,
    n_grid: &[usize],
    replicates: usize,
    predictors: &[PredictorSpec],
    with_mc: bool,
) -> CliResult<()> {
    let instance = build_instance(&config.instance, seed)?;
    // One fixed task for the whole curve.
    let (_, beta_star) = {
        let alpha = instance.task.sample_alpha(&mut stream_rng(seed, 2));
        let beta = instance.ground_truth.matrix() * &alpha;
        (alpha, beta)
    };
    let settings = OptimizerSettings::default();

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut divergence = serde_json::Map::new();
    for (pred_idx, spec) in predictors.iter().enumerate() {
        let realized = realize_predictor(
            spec,
            &instance,
            instance.n,
            &settings,
            seed.wrapping_add(7919 * (1 + pred_idx as u64)),
        )?;
        let spectrum = whiten(&instance.covariance, &realized.penalty)?;
        let points: Vec<(usize, Option<DecompositionEstimate>, Result<AsymptoticReport, String>)> =
            n_grid
                .par_iter()
                .enumerate()
                .map(|(point_idx, &n)| {
                    let estimate = if with_mc {
                        let stream_base =
                            ((3 + pred_idx * n_grid.len() + point_idx) as u64) << 32;
                        let reps: Vec<_> = (0..replicates)
                            .into_par_iter()
                            .map(|j| {
                                sample_replicate(
                                    &instance.covariance,
                                    &realized.penalty,
                                    &beta_star,
                                    n,
                                    seed,
                                    stream_base,
                                    j as u64,
                                )
                            })
                            .collect();
                        Some(combine_replicates(
                            &reps,
                            &beta_star,
                            &instance.covariance,
                            instance.sigma2,
                        ))
                    } else {
                        None
                    };
                    let report = risk_components(
                        &spectrum,
                        &realized.penalty,
                        &beta_star,
                        instance.sigma2,
                        n,
                    )
                    .map_err(|e| e.to_string());
                    (n, estimate, report)
                })
                .collect();

        let mut peak_n = 0_usize;
        let mut peak_vxe = f64::NEG_INFINITY;
        for (n, estimate, report) in &points {
            let status = match report {
                Ok(_) => "ok".to_string(),
                Err(e) => e.clone(),
            };
            if let Some(est) = estimate {
                if est.fg_variance_xe > peak_vxe {
                    peak_vxe = est.fg_variance_xe;
                    peak_n = *n;
                }
            }
            let (r_asy, b_asy, vb_asy, v_asy) = match report {
                Ok(r) => (
                    fmt(r.risk),
                    fmt(r.fg_bias),
                    fmt(r.fg_variance_x),
                    fmt(r.fg_variance_xe),
                ),
                Err(_) => Default::default(),
            };
            rows.push(vec![
                n.to_string(),
                realized.label.clone(),
                estimate.map(|e| fmt(e.mean_risk)).unwrap_or_default(),
                estimate.map(|e| fmt(e.mean_risk_se)).unwrap_or_default(),
                r_asy,
                estimate.map(|e| fmt(e.fg_bias)).unwrap_or_default(),
                estimate.map(|e| fmt(e.fg_variance_x)).unwrap_or_default(),
                estimate.map(|e| fmt(e.fg_variance_xe)).unwrap_or_default(),
                estimate.map(|e| fmt(e.fg_variance_e)).unwrap_or_default(),
                b_asy,
                vb_asy,
                v_asy,
                status,
            ]);
        }
        if with_mc {
            divergence.insert(
                realized.label.clone(),
                serde_json::json!({ "peak_interaction_n": peak_n, "peak_interaction": peak_vxe }),
            );
        }
    }
    dir.write_csv("results.csv", &RISK_CURVE_HEADER, &rows)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "kind": config.experiment.kind(),
            "divergence": divergence,
        }),
    )
}

const ABLATION_HEADER: [&str; 9] = [
    "axis",
    "value",
    "predictor",
    "R_avg",
    "B_avg",
    "V",
    "R_sim_mean",
    "R_sim_sd",
    "status",
];

#[allow(clippy::too_many_arguments)]
fn run_ablation(
    config: &ExperimentConfig,
    seed: u64,
    dir: &OutputDir,
    axis: AblationAxis,
    values: &[f64],
    predictors: &[PredictorSpec],
    draws: usize,
    optimizer: &OptimizerSettings,
) -> CliResult<()> {
    let axis_name = format!("{axis:?}").to_lowercase();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut optima = serde_json::Map::new();

    for (value_idx, &value) in values.iter().enumerate() {
        let (instance, n) = instance_for_axis(config, seed, axis, value, value_idx)?;
        for (pred_idx, spec) in predictors.iter().enumerate() {
            let opt_seed = seed
                .wrapping_add(104_729 * (1 + value_idx as u64))
                .wrapping_add(7919 * (1 + pred_idx as u64));
            let realized = match realize_predictor(spec, &instance, n, optimizer, opt_seed) {
                Ok(r) => r,
                Err(e) => {
                    rows.push(vec![
                        axis_name.clone(),
                        fmt(value),
                        spec.label().into(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        e.to_string(),
                    ]);
                    continue;
                }
            };
            let exact = whiten(&instance.covariance, &realized.penalty).and_then(|spectrum| {
                averaged_objective(
                    &spectrum,
                    &realized.penalty,
                    instance.ground_truth.matrix(),
                    &instance.scaled_prior(),
                    instance.sigma2,
                    n,
                )
            });
            let (exact_cols, status) = match &exact {
                Ok((b_avg, r_avg)) => {
                    let v = (r_avg - b_avg) / (b_avg + instance.sigma2);
                    ((fmt(*r_avg), fmt(*b_avg), fmt(v)), "ok".to_string())
                }
                Err(e) => (
                    (String::new(), String::new(), String::new()),
                    e.to_string(),
                ),
            };

            // Error bars: actual risk on simulated data across task draws.
            let stream_base = ((100 + value_idx * predictors.len() + pred_idx) as u64) << 32;
            let risks: Vec<f64> = (0..draws)
                .into_par_iter()
                .map(|d| {
                    let mut rng = stream_rng(seed, stream_base + d as u64);
                    let alpha = instance.task.sample_alpha(&mut rng);
                    let beta = instance.ground_truth.matrix() * alpha;
                    let data =
                        sample_data(&instance.covariance, &beta, instance.sigma2, n, &mut rng);
                    fit(&data, &realized.representation, &realized.regularization)
                        .map(|f| empirical_risk(&f.coefficients, &beta, &instance.covariance))
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let finite: Vec<f64> = risks.iter().copied().filter(|v| v.is_finite()).collect();
            let (sim_mean, sim_sd) = if finite.len() > 1 {
                let (m, se) = transfer_risk_core::linalg::mean_se(&finite);
                (m, se * (finite.len() as f64).sqrt())
            } else {
                (f64::NAN, f64::NAN)
            };

            if let Ok((_, r_avg)) = exact {
                let key = format!("{}:{}", realized.label, fmt(value));
                optima.insert(key, serde_json::json!(r_avg));
            }
            rows.push(vec![
                axis_name.clone(),
                fmt(value),
                realized.label.clone(),
                exact_cols.0,
                exact_cols.1,
                exact_cols.2,
                fmt(sim_mean),
                fmt(sim_sd),
                status,
            ]);
        }
    }
    dir.write_csv("results.csv", &ABLATION_HEADER, &rows)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "kind": "ablation",
            "axis": axis_name,
            "averaged_risk": optima,
        }),
    )
}

/// Rebuilds the instance with one axis overridden.
fn instance_for_axis(
    config: &ExperimentConfig,
    seed: u64,
    axis: AblationAxis,
    value: f64,
    value_idx: usize,
) -> CliResult<(Instance, usize)> {
    let mut spec = config.instance.clone();
    match axis {
        AblationAxis::N => {
            spec.n = value as usize;
        }
        AblationAxis::M => match spec.covariance {
            CovarianceSpec::Wishart { jitter, .. } => {
                spec.covariance = CovarianceSpec::Wishart {
                    m: value as usize,
                    jitter,
                };
            }
            _ => {
                return Err(CliError::Config(
                    "the m axis needs a wishart covariance".into(),
                ))
            }
        },
        AblationAxis::K => {
            spec.k = Some(value as usize);
        }
        AblationAxis::Q => {
            spec.q = value as usize;
        }
        AblationAxis::Snr => {
            spec.snr = value;
        }
        AblationAxis::Rho => {
            spec.ground_truth = crate::config::GroundTruthSpec::GaussianAr1 { rho: value };
        }
    }
    // Axes that resample the ground truth get a value-specific stream so the
    // draws stay independent across grid points.
    let instance = match axis {
        AblationAxis::Q | AblationAxis::Rho => {
            let covariance = crate::instance::build_covariance(&spec.covariance, spec.p, seed)?;
            let ground_truth = build_ground_truth(
                &spec.ground_truth,
                spec.p,
                spec.q,
                seed,
                (10 + value_idx) as u64,
            )?;
            let prior_shape = DMatrix::identity(spec.q, spec.q);
            let scale = TaskModel::calibrate_snr(
                &ground_truth,
                &prior_shape,
                spec.sigma2,
                spec.snr,
            )?;
            let task = TaskModel::new(prior_shape, scale, spec.sigma2)?;
            Instance {
                covariance,
                ground_truth,
                task,
                n: spec.n,
                width: spec.k.unwrap_or(spec.p),
                sigma2: spec.sigma2,
            }
        }
        _ => build_instance(&spec, seed)?,
    };
    let n = instance.n;
    Ok((instance, n))
}

const SPECTRUM_HEADER: [&str; 9] = [
    "index", "eta", "theta", "phi", "x_bias", "w_bias", "x_direct", "x_relaxed", "status",
];

fn run_spectrum(
    config: &ExperimentConfig,
    seed: u64,
    dir: &OutputDir,
    objective: ObjectiveKind,
    radius: f64,
) -> CliResult<()> {
    let instance = build_instance(&config.instance, seed)?;
    let problem = alignment_coefficients(
        &instance.covariance,
        instance.ground_truth.matrix(),
        &instance.scaled_prior(),
        instance.n,
        instance.sigma2,
        radius,
    );
    let core_objective = match objective {
        ObjectiveKind::Avg => SpectrumObjective::Averaged,
        ObjectiveKind::Worst => SpectrumObjective::Worst,
    };
    let variance = minimize_variance_spectrum(
        &problem.eigenvalues.rows(0, problem.h).into_owned(),
        problem.n,
        problem.h,
        1.0,
    )?;
    let bias = minimize_bias_spectrum(&problem, 1.0)?;
    let direct = solve_direct(&problem, core_objective, 10, seed)?;
    let relaxed = solve_relaxed(&problem, core_objective)?;

    let mut rows = Vec::with_capacity(problem.h);
    for i in 0..problem.h {
        rows.push(vec![
            i.to_string(),
            fmt(problem.eigenvalues[i]),
            fmt(problem.alignments[i]),
            fmt(problem.products[i]),
            fmt(bias.x[i]),
            fmt(bias.weights[i]),
            fmt(direct.x[i]),
            fmt(relaxed.x[i]),
            "ok".into(),
        ]);
    }
    dir.write_csv("results.csv", &SPECTRUM_HEADER, &rows)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "kind": "spectrum",
            "regime": match problem.regime() {
                SelectionRegime::Hard => "hard",
                SelectionRegime::Soft => "soft",
            },
            "h": problem.h,
            "h1": problem.h1,
            "h0": bias.cutoff,
            "variance_optimum": variance.value,
            "bias_optimum": bias.value,
            "direct_optimum": direct.value,
            "relaxed_optimum": relaxed.value,
            "direct_converged": direct.converged,
            "relaxed_converged": relaxed.converged,
        }),
    )
}

const TRACE_HEADER: [&str; 5] = ["step", "episode", "L", "grad_norm", "status"];

fn run_full_opt(
    config: &ExperimentConfig,
    seed: u64,
    dir: &OutputDir,
    objective: ObjectiveKind,
    width: Option<usize>,
    radius: f64,
    optimizer: &OptimizerSettings,
) -> CliResult<()> {
    let instance = build_instance(&config.instance, seed)?;
    let core_objective = match objective {
        ObjectiveKind::Avg => PretrainingObjective::averaged(
            &instance.covariance,
            instance.ground_truth.matrix(),
            instance.scaled_prior(),
            instance.sigma2,
            instance.n,
        ),
        ObjectiveKind::Worst => PretrainingObjective::worst(
            &instance.covariance,
            instance.ground_truth.matrix(),
            instance.sigma2,
            instance.n,
            radius,
        ),
    };
    let mode = match objective {
        ObjectiveKind::Avg => ObjectiveMode::Averaged,
        ObjectiveKind::Worst => ObjectiveMode::Worst,
    };
    let mut opt_config = OptimizerConfig::new(mode, width.unwrap_or(instance.width));
    opt_config.step_size = optimizer.step_size;
    opt_config.max_episodes = optimizer.max_episodes;
    opt_config.seed = seed;
    let result = optimize(&opt_config, &core_objective, None)?;

    let rows: Vec<Vec<String>> = result
        .trace
        .iter()
        .map(|row| {
            vec![
                row.step.to_string(),
                row.episode.to_string(),
                fmt(row.loss),
                fmt(row.grad_norm),
                "ok".into(),
            ]
        })
        .collect();
    dir.write_csv("results.csv", &TRACE_HEADER, &rows)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "kind": "full-opt",
            "objective": match objective { ObjectiveKind::Avg => "avg", ObjectiveKind::Worst => "worst" },
            "optimum": result.value,
            "lambda_alpha": result.params.lambda_alpha,
            "lambda_beta": result.params.lambda_beta,
            "lambda": result.params.lambda,
            "steps": result.trace.len(),
        }),
    )
}

fn run_heatmap(
    config: &ExperimentConfig,
    seed: u64,
    dir: &OutputDir,
    width: Option<usize>,
    optimizer: &OptimizerSettings,
) -> CliResult<()> {
    let instance = build_instance(&config.instance, seed)?;
    let core_objective = PretrainingObjective::averaged(
        &instance.covariance,
        instance.ground_truth.matrix(),
        instance.scaled_prior(),
        instance.sigma2,
        instance.n,
    );
    let mut opt_config =
        OptimizerConfig::new(ObjectiveMode::Averaged, width.unwrap_or(instance.width));
    opt_config.step_size = optimizer.step_size;
    opt_config.max_episodes = optimizer.max_episodes;
    opt_config.seed = seed;
    let result = optimize(&opt_config, &core_objective, None)?;

    let (feature_overlap, covariance_overlap, spectrum) = heatmap_alignment(
        &result.representation,
        &instance.ground_truth,
        &instance.covariance,
    );
    write_matrix_csv(dir, "M.csv", &feature_overlap)?;
    write_matrix_csv(dir, "N.csv", &covariance_overlap)?;
    let spectrum_rows: Vec<Vec<String>> = spectrum
        .iter()
        .enumerate()
        .map(|(i, &v)| vec![i.to_string(), fmt(v), "ok".into()])
        .collect();
    dir.write_csv("spectrum.csv", &["index", "eigenvalue", "status"], &spectrum_rows)?;
    let trace_rows: Vec<Vec<String>> = result
        .trace
        .iter()
        .map(|row| {
            vec![
                row.step.to_string(),
                row.episode.to_string(),
                fmt(row.loss),
                fmt(row.grad_norm),
                "ok".into(),
            ]
        })
        .collect();
    dir.write_csv("results.csv", &TRACE_HEADER, &trace_rows)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "kind": "heatmap",
            "optimum": result.value,
            "top_block_mass": top_block_mass(&feature_overlap, instance.q()),
        }),
    )
}

/// Mean absolute overlap of the top-q block versus its off-block complement.
fn top_block_mass(m: &DMatrix<f64>, q: usize) -> serde_json::Value {
    let p = m.nrows();
    let q = q.min(p);
    let mut inside = 0.0;
    let mut outside = 0.0;
    let mut n_in = 0_usize;
    let mut n_out = 0_usize;
    for i in 0..q {
        for j in 0..p {
            if j < q {
                inside += m[(i, j)].abs();
                n_in += 1;
            } else {
                outside += m[(i, j)].abs();
                n_out += 1;
            }
        }
    }
    serde_json::json!({
        "inside": inside / n_in.max(1) as f64,
        "outside": outside / n_out.max(1) as f64,
    })
}

fn write_matrix_csv(dir: &OutputDir, name: &str, matrix: &DMatrix<f64>) -> CliResult<()> {
    let header: Vec<String> = (0..matrix.ncols()).map(|j| format!("c{j}")).collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = (0..matrix.nrows())
        .map(|i| (0..matrix.ncols()).map(|j| fmt(matrix[(i, j)])).collect())
        .collect();
    dir.write_csv(name, &header_refs, &rows)
}

const UPSTREAM_HEADER: [&str; 5] = ["n_pre", "error", "se", "slope", "status"];

#[allow(clippy::too_many_arguments)]
fn run_upstream(
    config: &ExperimentConfig,
    seed: u64,
    dir: &OutputDir,
    n_pre_grid: &[usize],
    seeds: u64,
    noise_variance: f64,
    predictor: &PredictorSpec,
) -> CliResult<()> {
    let instance = build_instance(&config.instance, seed)?;
    let settings = OptimizerSettings::default();
    let realized = realize_predictor(predictor, &instance, instance.n, &settings, seed)?;
    let spectrum = whiten(&instance.covariance, &realized.penalty)?;
    let (rows, slope) = scaling_experiment(
        &instance.covariance,
        instance.ground_truth.matrix(),
        &instance.scaled_prior(),
        &realized.penalty,
        &spectrum,
        instance.sigma2,
        instance.n,
        n_pre_grid,
        noise_variance,
        seeds,
        seed.wrapping_add(31),
    )?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_pre.to_string(),
                fmt(r.mean_error),
                fmt(r.se),
                fmt(slope),
                "ok".into(),
            ]
        })
        .collect();
    dir.write_csv("results.csv", &UPSTREAM_HEADER, &csv_rows)?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({ "kind": "upstream", "slope": slope }),
    )
}

const CONCENTRATION_HEADER: [&str; 7] = [
    "q",
    "draws",
    "R_avg",
    "B_avg",
    "max_abs_dev",
    "mean_abs_dev",
    "status",
];

fn run_concentration(
    config: &ExperimentConfig,
    seed: u64,
    dir: &OutputDir,
    q_grid: &[usize],
    draws: usize,
    predictor: &PredictorSpec,
) -> CliResult<()> {
    let settings = OptimizerSettings::default();
    let mut rows = Vec::new();
    let mut max_devs = Vec::new();
    for (q_idx, &q) in q_grid.iter().enumerate() {
        let mut spec = config.instance.clone();
        spec.q = q;
        let covariance = crate::instance::build_covariance(&spec.covariance, spec.p, seed)?;
        let ground_truth =
            build_ground_truth(&spec.ground_truth, spec.p, q, seed, (10 + q_idx) as u64)?;
        let prior_shape = DMatrix::identity(q, q);
        let scale =
            TaskModel::calibrate_snr(&ground_truth, &prior_shape, spec.sigma2, spec.snr)?;
        let task = TaskModel::new(prior_shape, scale, spec.sigma2)?;
        let instance = Instance {
            covariance,
            ground_truth,
            task,
            n: spec.n,
            width: spec.k.unwrap_or(spec.p),
            sigma2: spec.sigma2,
        };
        let realized =
            realize_predictor(predictor, &instance, instance.n, &settings, seed)?;
        let spectrum = whiten(&instance.covariance, &realized.penalty)?;
        let result = averaged_objective(
            &spectrum,
            &realized.penalty,
            instance.ground_truth.matrix(),
            &instance.scaled_prior(),
            instance.sigma2,
            instance.n,
        );
        match result {
            Ok((b_avg, r_avg)) => {
                // The per-task risk is a quadratic form in the task vector:
                // R(alpha) = (1 + V) alpha^T M alpha + sigma^2 V.
                let (moment, variance_factor) = worst_case_moment(
                    &spectrum,
                    &realized.penalty,
                    instance.ground_truth.matrix(),
                    instance.n,
                )?;
                let stream_base = ((200 + q_idx) as u64) << 32;
                let devs: Vec<f64> = (0..draws)
                    .into_par_iter()
                    .map(|d| {
                        let mut rng = stream_rng(seed, stream_base + d as u64);
                        let alpha = instance.task.sample_alpha(&mut rng);
                        let bias = (&moment * &alpha).dot(&alpha);
                        let risk =
                            (1.0 + variance_factor) * bias + instance.sigma2 * variance_factor;
                        (risk - r_avg).abs()
                    })
                    .collect();
                let max_dev = devs.iter().cloned().fold(0.0_f64, f64::max);
                let mean_dev = devs.iter().sum::<f64>() / devs.len() as f64;
                max_devs.push((q, max_dev));
                rows.push(vec![
                    q.to_string(),
                    draws.to_string(),
                    fmt(r_avg),
                    fmt(b_avg),
                    fmt(max_dev),
                    fmt(mean_dev),
                    "ok".into(),
                ]);
            }
            Err(e) => {
                rows.push(vec![
                    q.to_string(),
                    draws.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.to_string(),
                ]);
            }
        }
    }
    dir.write_csv("results.csv", &CONCENTRATION_HEADER, &rows)?;
    let shrink = if max_devs.len() >= 2 {
        let first = max_devs.first().unwrap().1;
        let last = max_devs.last().unwrap().1;
        serde_json::json!(first / last)
    } else {
        serde_json::Value::Null
    };
    dir.write_json(
        "summary.json",
        &serde_json::json!({ "kind": "concentration", "max_dev_shrink": shrink }),
    )
}

/// Compact oracle battery behind the `selftest` subcommand. Each check is a
/// small, fast rerun of one of the library's independent validations.
pub fn selftest() -> CliResult<()> {
    let mut failures = 0_usize;
    let mut run = |name: &str, check: &dyn Fn() -> Result<(), String>| {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    };

    run("fixed-point-hand-cases", &checks::fixed_point_hand_cases);
    run("fixed-point-brackets", &checks::fixed_point_brackets);
    run("shrink-profile", &checks::shrink_profile_shape);
    run("penalty-dual-construction", &checks::penalty_dual_construction);
    run("predictor-interpolation", &checks::predictor_interpolation);
    run("whitening-aligned", &checks::whitening_aligned);
    run("variance-optimum", &checks::variance_optimum);
    run("soft-selection-optimum", &checks::soft_selection_optimum);
    run("selection-cutoff", &checks::selection_cutoff);
    run("midpoint-convexity", &checks::midpoint_convexity);
    run("gradient-vs-fd", &checks::gradient_vs_fd);
    run("mc-telescoping", &checks::mc_telescoping);
    run("projection-kkt", &checks::projection_kkt);
    run("stream-determinism", &checks::stream_determinism);

    if failures > 0 {
        Err(CliError::Numeric(format!("{failures} selftest checks failed")))
    } else {
        println!("selftest: all checks passed");
        Ok(())
    }
}

mod checks {
    use super::*;
    use transfer_risk_core::asymptotics::solve_b0_from_eigenvalues;
    use transfer_risk_core::full_opt::{fd_gradient, objective_gradient};
    use transfer_risk_core::model::CovarianceModel;
    use transfer_risk_core::montecarlo::fg_estimates;
    use transfer_risk_core::penalty::{
        shrink_profile, Regularization, RegularizationParams, Representation,
    };
    use transfer_risk_core::rng::{standard_normal_matrix, standard_normal_vector};
    use transfer_risk_core::spectrum_opt::{
        averaged_bias_x, compute_h0, cutoff_inequality_holds, is_feasible, project_feasible,
        variance_factor_x, worst_bias_x,
    };

    fn expect(cond: bool, msg: &str) -> Result<(), String> {
        if cond {
            Ok(())
        } else {
            Err(msg.to_string())
        }
    }

    pub fn fixed_point_hand_cases() -> Result<(), String> {
        let fp = solve_b0_from_eigenvalues(&[1.0; 4], 2).map_err(|e| e.to_string())?;
        expect((fp.value - 1.0).abs() <= 1e-12, "equal spectrum b0 != 1")?;
        let fp = solve_b0_from_eigenvalues(&[2.0, 1.0], 1).map_err(|e| e.to_string())?;
        expect(
            (fp.value - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12,
            "two-level b0 != 1/sqrt(2)",
        )
    }

    pub fn fixed_point_brackets() -> Result<(), String> {
        for trial in 0..200_u64 {
            let mut rng = stream_rng(40, trial);
            use rand::Rng;
            let h = 2 + (rng.random::<u64>() % 99) as usize;
            let n = 1 + (rng.random::<u64>() % (h as u64 - 1)) as usize;
            let t: Vec<f64> = (0..h)
                .map(|_| (rng.random::<f64>() * 6.0 - 3.0).exp())
                .collect();
            let fp = solve_b0_from_eigenvalues(&t, n).map_err(|e| e.to_string())?;
            expect(
                fp.residual <= 1e-12 * h as f64,
                &format!("trial {trial}: residual {r}", r = fp.residual),
            )?;
            expect(
                fp.value >= fp.lower * (1.0 - 1e-12) && fp.value <= fp.upper * (1.0 + 1e-12),
                &format!("trial {trial}: root escaped the bracket"),
            )?;
        }
        Ok(())
    }

    pub fn shrink_profile_shape() -> Result<(), String> {
        let params = RegularizationParams::new(0.9, 0.2, 2.0).map_err(|e| e.to_string())?;
        expect(
            (shrink_profile(0.0, &params) - 2.2).abs() <= 1e-14,
            "maximum at zero",
        )?;
        expect(
            (shrink_profile(f64::INFINITY, &params) - 0.2).abs() <= 1e-14,
            "minimum at infinity",
        )?;
        let mut previous = shrink_profile(0.0, &params);
        for i in 1..1000 {
            let current = shrink_profile(i as f64 * 0.02, &params);
            expect(current < previous, "profile not strictly decreasing")?;
            previous = current;
        }
        Ok(())
    }

    pub fn penalty_dual_construction() -> Result<(), String> {
        let mut rng = stream_rng(41, 0);
        let (p, k) = (8, 3);
        let b = standard_normal_matrix(p, k, &mut rng);
        let params = RegularizationParams::new(0.6, 0.25, 1.2).map_err(|e| e.to_string())?;
        let rep = Representation::from_matrix(b.clone()).map_err(|e| e.to_string())?;
        let pen = Penalty::build(&rep, &Regularization::Finite(params))
            .map_err(|e| e.to_string())?;
        let gamma = pen.gamma().map_err(|e| e.to_string())?;
        let a = params.lambda_alpha / params.lambda;
        let inner = b.transpose() * &b + 2.0 * a * DMatrix::<f64>::identity(k, k);
        let inner_inv = inner.try_inverse().ok_or("inner inverse")?;
        let proj = DMatrix::<f64>::identity(p, p) - &b * &inner_inv * b.transpose();
        let direct = params.lambda * &proj * &proj
            + params.lambda_alpha * &b * &inner_inv * &inner_inv * b.transpose()
            + params.lambda_beta * DMatrix::<f64>::identity(p, p);
        let scale = direct.amax();
        expect(
            (gamma - direct).amax() <= 1e-9 * scale,
            "dual constructions disagree",
        )
    }

    pub fn predictor_interpolation() -> Result<(), String> {
        let mut rng = stream_rng(42, 0);
        let (n, p) = (12, 6);
        let cov = CovarianceModel::ar1(0.4, p).map_err(|e| e.to_string())?;
        let beta = standard_normal_vector(p, &mut rng);
        let data = sample_data(&cov, &beta, 0.0, n, &mut rng);
        let rep = Representation::identity(p);
        let params = RegularizationParams::new(1.0, 0.5, 2.0).map_err(|e| e.to_string())?;
        let fitted = fit(&data, &rep, &Regularization::Finite(params))
            .map_err(|e| e.to_string())?;
        expect(
            (&fitted.coefficients - &beta).norm() < 1e-8,
            "noiseless identifiable fit must recover the signal",
        )
    }

    pub fn whitening_aligned() -> Result<(), String> {
        let mut rng = stream_rng(43, 0);
        let p = 10;
        let cov = CovarianceModel::wishart_jitter(p, 7, 0.0, &mut rng);
        let c = 3.0;
        let weights = DVector::from_fn(p, |i, _| {
            let eta = cov.eigenvalues()[i];
            if eta > 1e-12 {
                c * eta
            } else {
                1.0
            }
        });
        let pen = Penalty::from_eigenbasis(cov.eigenvectors().clone(), weights)
            .map_err(|e| e.to_string())?;
        let spec = whiten(&cov, &pen).map_err(|e| e.to_string())?;
        expect(spec.support() == 7, "support must equal the covariance rank")?;
        for i in 0..7 {
            expect(
                (spec.eigenvalues()[i] - 1.0 / c).abs() <= 1e-10,
                "aligned whitening must flatten the spectrum",
            )?;
        }
        Ok(())
    }

    pub fn variance_optimum() -> Result<(), String> {
        let mut rng = stream_rng(44, 0);
        let p = 9;
        let cov = CovarianceModel::wishart_jitter(p, p, 0.05, &mut rng);
        let n = 3;
        for &c in &[0.1, 1.0, 7.0] {
            let weights = DVector::from_fn(p, |i, _| c * cov.eigenvalues()[i]);
            let pen = Penalty::from_eigenbasis(cov.eigenvectors().clone(), weights)
                .map_err(|e| e.to_string())?;
            let spec = whiten(&cov, &pen).map_err(|e| e.to_string())?;
            let report = risk_components(&spec, &pen, &DVector::zeros(p), 1.0, n)
                .map_err(|e| e.to_string())?;
            let optimum = 1.0 / (p as f64 / n as f64 - 1.0);
            expect(
                (report.variance_factor.unwrap() - optimum).abs() <= 1e-10,
                &format!("variance factor at c = {c}"),
            )?;
        }
        Ok(())
    }

    pub fn soft_selection_optimum() -> Result<(), String> {
        let cov = CovarianceModel::identity(3);
        let mut b = DVector::zeros(3);
        for (i, theta) in [10.0_f64, 1.0, 0.1].iter().enumerate() {
            b += theta.sqrt() * cov.eigenvectors().column(i);
        }
        let bstar = DMatrix::from_column_slice(3, 1, b.as_slice());
        let problem = alignment_coefficients(
            &cov,
            &bstar,
            &DMatrix::identity(1, 1),
            1,
            1.0,
            1.0,
        );
        let sol = minimize_bias_spectrum(&problem, 1.0).map_err(|e| e.to_string())?;
        expect(sol.cutoff == Some(2), "cutoff must be 2")?;
        expect(
            (sol.value - (0.1 + 1.0 / 1.1)).abs() <= 1e-9,
            &format!("soft optimum {v}", v = sol.value),
        )
    }

    pub fn selection_cutoff() -> Result<(), String> {
        for trial in 0..200_u64 {
            let mut rng = stream_rng(45, trial);
            use rand::Rng;
            let h1 = 2 + (rng.random::<u64>() % 29) as usize;
            let n = 1 + (rng.random::<u64>() % (h1 as u64 - 1)) as usize;
            let mut products: Vec<f64> =
                (0..h1).map(|_| (rng.random::<f64>() * 4.0).exp()).collect();
            products.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let products = DVector::from_vec(products);
            let h0 = compute_h0(&products, h1, n).map_err(|e| e.to_string())?;
            for m in n..=h1 {
                expect(
                    cutoff_inequality_holds(&products, n, m) == (m <= h0),
                    &format!("trial {trial}: cutoff misclassified m = {m}"),
                )?;
            }
        }
        Ok(())
    }

    pub fn midpoint_convexity() -> Result<(), String> {
        let mut rng = stream_rng(46, 0);
        let p = 5;
        let cov = CovarianceModel::wishart_jitter(p, p, 0.1, &mut rng);
        let bstar = standard_normal_matrix(p, 2, &mut rng);
        let root = standard_normal_matrix(2, 2, &mut rng);
        let prior = &root * root.transpose();
        let problem = alignment_coefficients(&cov, &bstar, &prior, 2, 1.0, 1.3);
        for trial in 0..500_u64 {
            use rand::Rng;
            let mut r = stream_rng(46, 1 + trial);
            let a = project_feasible(
                &DVector::from_fn(problem.h, |_, _| r.random::<f64>()),
                problem.n,
            );
            let b = project_feasible(
                &DVector::from_fn(problem.h, |_, _| r.random::<f64>()),
                problem.n,
            );
            let mid = 0.5 * (&a + &b);
            for f in [
                &(|x: &DVector<f64>| variance_factor_x(x, problem.n))
                    as &dyn Fn(&DVector<f64>) -> f64,
                &|x| averaged_bias_x(x, &problem),
                &|x| worst_bias_x(x, &problem),
            ] {
                expect(
                    f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-12,
                    &format!("trial {trial}: midpoint convexity violated"),
                )?;
            }
        }
        Ok(())
    }

    pub fn gradient_vs_fd() -> Result<(), String> {
        let mut rng = stream_rng(47, 0);
        let p = 8;
        let cov = CovarianceModel::wishart_jitter(p, p, 0.05, &mut rng);
        let bstar = standard_normal_matrix(p, 3, &mut rng);
        let objective = PretrainingObjective::averaged(
            &cov,
            &bstar,
            DMatrix::identity(3, 3),
            1.0,
            3,
        );
        let bhat = standard_normal_matrix(p, 3, &mut rng);
        let params = RegularizationParams::new(0.8, 0.3, 1.2).map_err(|e| e.to_string())?;
        let analytic = objective_gradient(&bhat, &params, &objective)
            .map_err(|e| e.to_string())?;
        let fd = fd_gradient(&bhat, &params, &objective, 1e-5).map_err(|e| e.to_string())?;
        let gap = (&analytic.grad_representation - &fd.grad_representation).amax()
            / fd.grad_representation.amax().max(1e-12);
        expect(gap <= 1e-4, &format!("gradient gap {gap}"))
    }

    pub fn mc_telescoping() -> Result<(), String> {
        let mut rng = stream_rng(48, 0);
        let p = 7;
        let cov = CovarianceModel::ar1(0.5, p).map_err(|e| e.to_string())?;
        let beta = standard_normal_vector(p, &mut rng);
        let pen = Penalty::isotropic(p, 1.0).map_err(|e| e.to_string())?;
        let est = fg_estimates(&cov, &pen, &beta, 0.4, 3, 30, 13, 0)
            .map_err(|e| e.to_string())?;
        let total =
            est.fg_bias + est.fg_variance_x + est.fg_variance_e + est.fg_variance_xe;
        expect(
            (total - est.mean_risk).abs() <= 1e-9 * est.mean_risk.abs().max(1.0),
            "components do not telescope",
        )?;
        expect(
            (est.sc_bias - (est.fg_bias + est.fg_variance_x)).abs()
                <= 1e-9 * est.sc_bias.abs().max(1.0),
            "replicate-mean bias identity broken",
        )
    }

    pub fn projection_kkt() -> Result<(), String> {
        let mut rng = stream_rng(49, 0);
        let h = 7;
        let n = 3;
        let y = 2.0 * standard_normal_vector(h, &mut rng);
        let x = project_feasible(&y, n);
        expect(is_feasible(&x, n, 1e-10), "projection infeasible")?;
        for trial in 0..200_u64 {
            use rand::Rng;
            let mut r = stream_rng(49, 1 + trial);
            let z = project_feasible(&DVector::from_fn(h, |_, _| r.random::<f64>()), n);
            expect(
                (&y - &x).dot(&(&z - &x)) <= 1e-10,
                &format!("trial {trial}: variational inequality violated"),
            )?;
        }
        Ok(())
    }

    pub fn stream_determinism() -> Result<(), String> {
        let a = standard_normal_vector(16, &mut stream_rng(50, 3));
        let b = standard_normal_vector(16, &mut stream_rng(50, 3));
        expect(a == b, "streams must replay identically")?;
        let c = standard_normal_vector(16, &mut stream_rng(50, 4));
        expect(a != c, "distinct streams must differ")
    }
}
