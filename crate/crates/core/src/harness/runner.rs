//! Experiment execution: dataset assembly, method dispatch, evaluation,
//! and run-directory persistence.

use super::config::{ExperimentConfig, TaskKind};
use super::HarnessError;
use crate::classification::{
    self, entropy, fit_classifier_deterministic, fit_classifier_ensemble, fit_classifier_vi,
    fit_temperature, predict_classifier_mc_dropout, predict_tta, Augmentation,
    CategoricalPrediction,
};
use crate::conformal::{
    cqr_calibrate, cqr_predict, gaussian_central_interval, raps_calibrate, raps_predict,
    IntervalPrediction, PredictionSet, RapsConfig,
};
use crate::data::{
    gen_heteroscedastic_sine, gen_two_moons, load_csv, split, SineNoise, SplitData,
    TabularDataset, Targets, Task,
};
use crate::losses::Loss;
use crate::metrics::{
    self, MetricsReport, SelectiveConfig, SelectiveReport,
};
use crate::nn::MlpConfig;
use crate::regression::{
    fit_bnn_vi_elbo, fit_der, fit_deterministic, fit_ensemble, fit_laplace_last_layer, fit_mve,
    fit_qr, mixture_moments, nig_moments, predict_mc_dropout, swag_collect, swag_sample_predict,
    GaussianPrediction, LaplaceNoise, ViConfig,
};
use crate::rng::child_seed;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Everything one run leaves behind, including the config snapshot that
/// reproduces it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub library_version: String,
    pub method: String,
    pub task: TaskKind,
    pub seed: u64,
    /// Derived stream root: `child_seed(seed, "method.<name>")`.
    pub method_seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub config: ExperimentConfig,
    pub report: TaskReport,
    /// Wall-clock seconds; the only field allowed to differ between
    /// reruns of the same config.
    pub timing_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", content = "metrics", rename_all = "snake_case")]
pub enum TaskReport {
    Regression(MetricsReport),
    Classification(ClassificationReport),
}

/// Classification counterpart of `MetricsReport`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ClassificationReport {
    pub accuracy: f64,
    /// Mean negative log predictive probability of the true class.
    pub nll: f64,
    pub mean_entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_set_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selective: Option<SelectiveAccuracy>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, ClassificationReport>,
}

/// Entropy-thresholded abstention summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveAccuracy {
    pub threshold: f64,
    pub kept_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_kept: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_delta: Option<f64>,
}

/// Per-sample test-set arrays persisted for plot-data generation.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RegressionEvalArrays {
    pub y: Vec<f64>,
    pub mean: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::jsonnum::opt_vec_f64_inf"
    )]
    pub lo: Option<Vec<f64>>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::jsonnum::opt_vec_f64_inf"
    )]
    pub hi: Option<Vec<f64>>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::jsonnum::opt_vec_f64_inf"
    )]
    pub uncertainty: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group: Option<Vec<String>>,
}

/// Build the dataset a config describes.
pub fn build_dataset(config: &ExperimentConfig) -> Result<TabularDataset, HarnessError> {
    let seed = config.dataset.seed.expect("resolved at load time");
    match config.dataset.kind.as_str() {
        "heteroscedastic_sine" => Ok(gen_heteroscedastic_sine(
            config.dataset.n,
            seed,
            SineNoise {
                a: config.dataset.noise_a,
                b: config.dataset.noise_b,
            },
        )?),
        "two_moons" => Ok(gen_two_moons(config.dataset.n, config.dataset.noise_std, seed)?),
        "csv" => {
            let path = config.dataset.path.as_ref().expect("validated");
            let target = config.dataset.target_column.as_ref().expect("validated");
            let task = match config.task {
                TaskKind::Regression => Task::Regression,
                TaskKind::Classification => Task::Classification,
            };
            Ok(load_csv(
                Path::new(path),
                task,
                target,
                config.dataset.group_column.as_deref(),
            )?)
        }
        other => Err(HarnessError::Config(format!("unknown dataset kind {other:?}"))),
    }
}

struct RegEval {
    mean: Vec<f64>,
    gaussian: Option<GaussianPrediction>,
    intervals: Option<IntervalPrediction>,
    uncertainty: Option<Vec<f64>>,
    val_uncertainty: Option<Vec<f64>>,
    warnings: Vec<String>,
    model_files: Vec<(String, String)>,
}

impl RegEval {
    fn from_gaussian(
        test: GaussianPrediction,
        val: Option<GaussianPrediction>,
        alpha: f64,
    ) -> Result<Self, HarnessError> {
        let intervals = gaussian_central_interval(&test, alpha)?;
        Ok(RegEval {
            mean: test.mean.clone(),
            uncertainty: Some(test.std.clone()),
            val_uncertainty: val.map(|g| g.std),
            gaussian: Some(test),
            intervals: Some(intervals),
            warnings: Vec::new(),
            model_files: Vec::new(),
        })
    }
}

fn model_config(config: &ExperimentConfig, input_dim: usize, output_dim: usize) -> MlpConfig {
    MlpConfig {
        input_dim,
        hidden: config.model.hidden.clone(),
        output_dim,
        activation: config.model.activation,
        dropout: config.dropout_rates(),
        init_seed: child_seed(config.method_seed(), "init"),
    }
}

fn train_config(config: &ExperimentConfig, n_train: usize, warnings: &mut Vec<String>) -> TrainConfig {
    let mut batch = config.train.batch_size;
    if batch > n_train {
        warnings.push(format!(
            "batch size {batch} exceeds training size {n_train}; clamped"
        ));
        batch = n_train;
    }
    TrainConfig {
        epochs: config.train.epochs,
        batch_size: batch.max(1),
        learning_rate: config.train.learning_rate,
        optimizer: config.train.optimizer,
        seed: child_seed(config.method_seed(), "train"),
        shuffle: config.train.shuffle,
        grad_clip: config.grad_clip(),
    }
}

fn run_regression_method(
    config: &ExperimentConfig,
    data: &SplitData,
) -> Result<RegEval, HarnessError> {
    let method_seed = config.method_seed();
    let alpha = config.eval.alpha;
    let train_x = &data.train.x;
    let train_y = data
        .train
        .y
        .as_regression()
        .ok_or_else(|| HarnessError::Config("regression method on non-regression targets".into()))?;
    let mut warnings = Vec::new();
    let tcfg = train_config(config, train_y.len(), &mut warnings);

    let mut eval = match config.method.name.as_str() {
        "deterministic" => {
            let (predictor, _) =
                fit_deterministic(train_x, train_y, &model_config(config, data.train.dim(), 1), &tcfg)?;
            let mean = predictor.predict(&data.test.x)?;
            RegEval {
                mean,
                gaussian: None,
                intervals: None,
                uncertainty: None,
                val_uncertainty: None,
                warnings: Vec::new(),
                model_files: vec![("model.json".into(), predictor.model.save_string()?)],
            }
        }
        "mve" => {
            let (predictor, _) =
                fit_mve(train_x, train_y, &model_config(config, data.train.dim(), 2), &tcfg)?;
            let test = predictor.predict(&data.test.x)?;
            let val = maybe_predict_gaussian(&data.val, |x| predictor.predict(x))?;
            let mut eval = RegEval::from_gaussian(test, val, alpha)?;
            eval.model_files
                .push(("model.json".into(), predictor.model.save_string()?));
            eval
        }
        "der" => {
            let (predictor, _) = fit_der(
                train_x,
                train_y,
                config.method.lambda,
                &model_config(config, data.train.dim(), 4),
                &tcfg,
            )?;
            let test = nig_moments(&predictor.predict(&data.test.x)?)?.to_gaussian();
            let val = maybe_predict_gaussian(&data.val, |x| {
                Ok(nig_moments(&predictor.predict(x)?)?.to_gaussian())
            })?;
            let mut eval = RegEval::from_gaussian(test, val, alpha)?;
            eval.model_files
                .push(("model.json".into(), predictor.model.save_string()?));
            eval
        }
        "qr" | "cqr" => {
            let levels = config.quantile_levels();
            let cfg = model_config(config, data.train.dim(), levels.len());
            let (predictor, _) = fit_qr(train_x, train_y, &levels, &cfg, &tcfg)?;
            let test = predictor.predict(&data.test.x)?;
            let (lo_idx, hi_idx) = outer_level_indices(&levels, alpha)?;
            let median = median_column(&test, &levels);
            let mut eval = if config.method.name == "qr" {
                let intervals = IntervalPrediction {
                    lo: test.column(lo_idx),
                    hi: test.column(hi_idx),
                };
                let uncertainty = half_widths(&intervals);
                let val_uncertainty = if data.val.is_empty() {
                    None
                } else {
                    let val_pred = predictor.predict(&data.val.x)?;
                    Some(half_widths(&IntervalPrediction {
                        lo: val_pred.column(lo_idx),
                        hi: val_pred.column(hi_idx),
                    }))
                };
                RegEval {
                    mean: median,
                    gaussian: None,
                    intervals: Some(intervals),
                    uncertainty: Some(uncertainty),
                    val_uncertainty,
                    warnings: Vec::new(),
                    model_files: Vec::new(),
                }
            } else {
                let calib_y = data.calib.y.as_regression().ok_or_else(|| {
                    HarnessError::Config("cqr needs regression calibration targets".into())
                })?;
                let calib_pred = predictor.predict(&data.calib.x)?.pair(lo_idx, hi_idx);
                let calibration = cqr_calibrate(&calib_pred, calib_y, alpha)?;
                let intervals = cqr_predict(&test.pair(lo_idx, hi_idx), &calibration)?;
                let uncertainty = half_widths(&intervals);
                let val_uncertainty = if data.val.is_empty() {
                    None
                } else {
                    let val_pred = predictor.predict(&data.val.x)?.pair(lo_idx, hi_idx);
                    Some(half_widths(&cqr_predict(&val_pred, &calibration)?))
                };
                let mut eval = RegEval {
                    mean: median,
                    gaussian: None,
                    intervals: Some(intervals),
                    uncertainty: Some(uncertainty),
                    val_uncertainty,
                    warnings: Vec::new(),
                    model_files: Vec::new(),
                };
                eval.model_files.push((
                    "conformal.json".into(),
                    serde_json::to_string_pretty(&calibration)?,
                ));
                eval
            };
            eval.model_files
                .push(("model.json".into(), predictor.model.save_string()?));
            eval
        }
        "deep_ensemble" => {
            let cfg = model_config(config, data.train.dim(), 2);
            let (ensemble, _) = fit_ensemble(
                train_x,
                train_y,
                &cfg,
                &tcfg,
                config.method.members,
                child_seed(method_seed, "ensemble"),
            )?;
            let test = mixture_moments(&ensemble.predict(&data.test.x)?)?;
            let val = maybe_predict_gaussian(&data.val, |x| {
                mixture_moments(&ensemble.predict(x)?)
            })?;
            let mut eval = RegEval::from_gaussian(test, val, alpha)?;
            for (i, member) in ensemble.members.iter().enumerate() {
                eval.model_files
                    .push((format!("member_{i:03}.json"), member.model.save_string()?));
            }
            eval
        }
        "mc_dropout" => {
            let cfg = model_config(config, data.train.dim(), 2);
            let mut warnings = Vec::new();
            if cfg.dropout.iter().all(|r| *r == 0.0) {
                warnings.push(
                    "mc_dropout with all dropout rates zero: epistemic term degenerates".into(),
                );
            }
            let (predictor, _) = fit_mve(train_x, train_y, &cfg, &tcfg)?;
            let t = config.method.passes;
            let test = mixture_moments(&predict_mc_dropout(
                &predictor.model,
                &data.test.x,
                t,
                child_seed(method_seed, "mc-test"),
            )?)?;
            let val = maybe_predict_gaussian(&data.val, |x| {
                mixture_moments(&predict_mc_dropout(
                    &predictor.model,
                    x,
                    t,
                    child_seed(method_seed, "mc-val"),
                )?)
            })?;
            let mut eval = RegEval::from_gaussian(test, val, alpha)?;
            eval.warnings = warnings;
            eval.model_files
                .push(("model.json".into(), predictor.model.save_string()?));
            eval
        }
        "swag" => {
            let cfg = model_config(config, data.train.dim(), 2);
            let (predictor, _) = fit_mve(train_x, train_y, &cfg, &tcfg)?;
            let mut model = predictor.model;
            let swag_base = TrainConfig {
                seed: child_seed(method_seed, "swag"),
                ..tcfg.clone()
            };
            let stats = swag_collect(
                &mut model,
                train_x,
                &Targets::Regression(train_y.to_vec()),
                &Loss::GaussianNll,
                config.method.swag_epochs,
                config.method.swag_k,
                config.method.swag_lr.unwrap_or(config.train.learning_rate),
                &swag_base,
            )?;
            let s = config.method.swag_samples;
            let scale = config.method.swag_scale;
            let test = mixture_moments(&swag_sample_predict(
                &stats,
                &model,
                &data.test.x,
                s,
                child_seed(method_seed, "swag-test"),
                scale,
            )?)?;
            let val = maybe_predict_gaussian(&data.val, |x| {
                mixture_moments(&swag_sample_predict(
                    &stats,
                    &model,
                    x,
                    s,
                    child_seed(method_seed, "swag-val"),
                    scale,
                )?)
            })?;
            let mut eval = RegEval::from_gaussian(test, val, alpha)?;
            eval.model_files
                .push(("model.json".into(), model.save_string()?));
            eval.model_files
                .push(("swag.json".into(), serde_json::to_string_pretty(&stats)?));
            eval
        }
        "laplace" => {
            let (noise, base_output) = match config.method.noise_mode.as_str() {
                "estimate" => (LaplaceNoise::EstimateFromResiduals, 1),
                "mve_head" => (LaplaceNoise::MveHead, 2),
                "fixed" => {
                    let v = config.method.noise_var.ok_or_else(|| {
                        HarnessError::Config("laplace fixed noise mode needs `noise_var`".into())
                    })?;
                    (LaplaceNoise::Fixed(v), 1)
                }
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown laplace noise mode {other:?}"
                    )))
                }
            };
            let cfg = model_config(config, data.train.dim(), base_output);
            let model = if base_output == 2 {
                fit_mve(train_x, train_y, &cfg, &tcfg)?.0.model
            } else {
                fit_deterministic(train_x, train_y, &cfg, &tcfg)?.0.model
            };
            let predictor = fit_laplace_last_layer(
                &model,
                train_x,
                train_y,
                config.method.prior_precision,
                noise,
            )?;
            let test = predictor.predict(&data.test.x)?;
            let val = maybe_predict_gaussian(&data.val, |x| predictor.predict(x))?;
            let mut eval = RegEval::from_gaussian(test, val, alpha)?;
            eval.model_files
                .push(("model.json".into(), predictor.model.save_string()?));
            eval.model_files.push((
                "laplace.json".into(),
                serde_json::to_string_pretty(&predictor.posterior)?,
            ));
            eval
        }
        "bnn_vi_elbo" => {
            let cfg = model_config(config, data.train.dim(), 2);
            let vi_cfg = ViConfig {
                prior_std: config.method.prior_std,
                kl_weight: config.method.kl_weight,
                mc_train_samples: config.method.mc_train_samples,
                init_sigma: config.method.init_sigma,
                frozen_layers: None,
            };
            let fitted = fit_bnn_vi_elbo(train_x, train_y, &cfg, &tcfg, &vi_cfg)?;
            let t = config.method.passes;
            let test = mixture_moments(&fitted.predictor.predict(
                &data.test.x,
                t,
                child_seed(method_seed, "vi-test"),
            )?)?;
            let val = maybe_predict_gaussian(&data.val, |x| {
                mixture_moments(&fitted.predictor.predict(
                    x,
                    t,
                    child_seed(method_seed, "vi-val"),
                )?)
            })?;
            let mut eval = RegEval::from_gaussian(test, val, alpha)?;
            eval.model_files.push((
                "vi.json".into(),
                serde_json::to_string_pretty(&fitted.predictor.model)?,
            ));
            eval
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown regression method {other:?}"
            )))
        }
    };
    eval.warnings.extend(warnings);
    Ok(eval)
}

fn maybe_predict_gaussian<F>(
    val: &TabularDataset,
    predict: F,
) -> Result<Option<GaussianPrediction>, HarnessError>
where
    F: Fn(&Tensor) -> Result<GaussianPrediction, crate::regression::RegressionError>,
{
    if val.is_empty() {
        Ok(None)
    } else {
        Ok(Some(predict(&val.x)?))
    }
}

fn outer_level_indices(levels: &[f64], alpha: f64) -> Result<(usize, usize), HarnessError> {
    let lo = levels
        .iter()
        .position(|l| (l - alpha / 2.0).abs() < 1e-9)
        .ok_or_else(|| {
            HarnessError::Config(format!(
                "quantile levels {levels:?} must include alpha/2 = {}",
                alpha / 2.0
            ))
        })?;
    let hi = levels
        .iter()
        .position(|l| (l - (1.0 - alpha / 2.0)).abs() < 1e-9)
        .ok_or_else(|| {
            HarnessError::Config(format!(
                "quantile levels {levels:?} must include 1 - alpha/2 = {}",
                1.0 - alpha / 2.0
            ))
        })?;
    Ok((lo, hi))
}

fn median_column(pred: &crate::regression::QuantilePrediction, levels: &[f64]) -> Vec<f64> {
    if let Some(idx) = levels.iter().position(|l| (l - 0.5).abs() < 1e-9) {
        pred.column(idx)
    } else {
        // Midpoint of the outermost quantiles.
        let last = levels.len() - 1;
        pred.values.iter().map(|row| 0.5 * (row[0] + row[last])).collect()
    }
}

fn half_widths(intervals: &IntervalPrediction) -> Vec<f64> {
    intervals.widths().iter().map(|w| 0.5 * w).collect()
}

fn regression_report(
    eval: &RegEval,
    y_test: &[f64],
    groups: Option<&[String]>,
    config: &ExperimentConfig,
) -> Result<MetricsReport, HarnessError> {
    let mut report = base_regression_report(eval, y_test, None, config)?;

    // Selective prediction needs a validation threshold.
    if let (Some(uncerts), Some(val_uncerts)) = (&eval.uncertainty, &eval.val_uncertainty) {
        if !val_uncerts.is_empty() {
            let cfg = SelectiveConfig::new(val_uncerts.clone(), config.eval.selective_quantile);
            report.selective = Some(selective_or_empty(uncerts, &eval.mean, y_test, &cfg)?);
        }
    }

    if let Some(labels) = groups {
        let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, label) in labels.iter().enumerate() {
            by_group.entry(label.clone()).or_default().push(i);
        }
        for (label, idx) in by_group {
            report
                .groups
                .insert(label, base_regression_report(eval, y_test, Some(&idx), config)?);
        }
    }
    Ok(report)
}

fn selective_or_empty(
    uncerts: &[f64],
    means: &[f64],
    targets: &[f64],
    cfg: &SelectiveConfig,
) -> Result<SelectiveReport, HarnessError> {
    metrics::selective_prediction(uncerts, means, targets, cfg).map_err(HarnessError::from)
}

/// Metrics on the whole test set or on a group's index subset.
fn base_regression_report(
    eval: &RegEval,
    y_test: &[f64],
    subset: Option<&[usize]>,
    config: &ExperimentConfig,
) -> Result<MetricsReport, HarnessError> {
    let pick = |xs: &[f64]| -> Vec<f64> {
        match subset {
            Some(idx) => idx.iter().map(|&i| xs[i]).collect(),
            None => xs.to_vec(),
        }
    };
    let y = pick(y_test);
    let mean = pick(&eval.mean);
    let mut report = MetricsReport {
        rmse: metrics::rmse(&mean, &y)?,
        mae: metrics::mae(&mean, &y)?,
        ..MetricsReport::default()
    };
    if let Some(g) = &eval.gaussian {
        let sub = GaussianPrediction {
            mean: pick(&g.mean),
            std: pick(&g.std),
        };
        report.nll = Some(metrics::nll_gaussian(&sub, &y)?);
        report.mace = Some(metrics::mace(&sub, &y, &config.mace_levels())?);
    }
    if let Some(intervals) = &eval.intervals {
        let sub = IntervalPrediction {
            lo: pick(&intervals.lo),
            hi: pick(&intervals.hi),
        };
        let (coverage, width) = metrics::coverage_width(&sub, &y);
        report.coverage = Some(coverage);
        report.mean_interval_width = Some(width);
    }
    if let Some(uncerts) = &eval.uncertainty {
        let u = pick(uncerts);
        report.mean_uncertainty = Some(u.iter().sum::<f64>() / u.len().max(1) as f64);
        let abs_errors: Vec<f64> = mean.iter().zip(&y).map(|(p, t)| (p - t).abs()).collect();
        report.error_uncert_corr = metrics::error_uncert_correlation(&u, &abs_errors);
    }
    Ok(report)
}

struct ClsEval {
    probs: CategoricalPrediction,
    entropies: Vec<f64>,
    val_entropies: Option<Vec<f64>>,
    sets: Option<PredictionSet>,
    warnings: Vec<String>,
    model_files: Vec<(String, String)>,
}

fn run_classification_method(
    config: &ExperimentConfig,
    data: &SplitData,
) -> Result<ClsEval, HarnessError> {
    let method_seed = config.method_seed();
    let (train_labels, n_classes) = data
        .train
        .y
        .as_classification()
        .ok_or_else(|| HarnessError::Config("classification method on regression targets".into()))?;
    let train_x = &data.train.x;
    let mut warnings = Vec::new();
    let tcfg = train_config(config, train_labels.len(), &mut warnings);
    let cfg = model_config(config, data.train.dim(), n_classes);

    let predictive = |probs: CategoricalPrediction| {
        let entropies = entropy(&probs);
        (probs, entropies)
    };

    let mut eval = match config.method.name.as_str() {
        "deterministic" => {
            let (clf, _) = fit_classifier_deterministic(train_x, train_labels, n_classes, &cfg, &tcfg)?;
            let (probs, entropies) = predictive(clf.predict(&data.test.x)?);
            let val_entropies = if data.val.is_empty() {
                None
            } else {
                Some(entropy(&clf.predict(&data.val.x)?))
            };
            ClsEval {
                probs,
                entropies,
                val_entropies,
                sets: None,
                warnings: Vec::new(),
                model_files: vec![("model.json".into(), clf.model.save_string()?)],
            }
        }
        "deep_ensemble" => {
            let (ens, _) = fit_classifier_ensemble(
                train_x,
                train_labels,
                n_classes,
                &cfg,
                &tcfg,
                config.method.members,
                child_seed(method_seed, "ensemble"),
            )?;
            let (probs, entropies) = predictive(ens.predict(&data.test.x)?.mean_prediction());
            let val_entropies = if data.val.is_empty() {
                None
            } else {
                Some(entropy(&ens.predict(&data.val.x)?.mean_prediction()))
            };
            let mut model_files = Vec::new();
            for (i, member) in ens.members.iter().enumerate() {
                model_files.push((format!("member_{i:03}.json"), member.model.save_string()?));
            }
            ClsEval {
                probs,
                entropies,
                val_entropies,
                sets: None,
                warnings: Vec::new(),
                model_files,
            }
        }
        "mc_dropout" => {
            if cfg.dropout.iter().all(|r| *r == 0.0) {
                warnings.push(
                    "mc_dropout with all dropout rates zero: epistemic term degenerates".into(),
                );
            }
            let (clf, _) = fit_classifier_deterministic(train_x, train_labels, n_classes, &cfg, &tcfg)?;
            let t = config.method.passes;
            let (probs, entropies) = predictive(
                predict_classifier_mc_dropout(
                    &clf.model,
                    &data.test.x,
                    t,
                    child_seed(method_seed, "mc-test"),
                )?
                .mean_prediction(),
            );
            let val_entropies = if data.val.is_empty() {
                None
            } else {
                Some(entropy(
                    &predict_classifier_mc_dropout(
                        &clf.model,
                        &data.val.x,
                        t,
                        child_seed(method_seed, "mc-val"),
                    )?
                    .mean_prediction(),
                ))
            };
            ClsEval {
                probs,
                entropies,
                val_entropies,
                sets: None,
                warnings: Vec::new(),
                model_files: vec![("model.json".into(), clf.model.save_string()?)],
            }
        }
        "bnn_vi_elbo" => {
            let vi_cfg = ViConfig {
                prior_std: config.method.prior_std,
                kl_weight: config.method.kl_weight,
                mc_train_samples: config.method.mc_train_samples,
                init_sigma: config.method.init_sigma,
                frozen_layers: None,
            };
            let (vi, _) =
                fit_classifier_vi(train_x, train_labels, n_classes, &cfg, &tcfg, &vi_cfg)?;
            let t = config.method.passes;
            let (probs, entropies) = predictive(
                vi.predict(&data.test.x, t, child_seed(method_seed, "vi-test"))?
                    .mean_prediction(),
            );
            let val_entropies = if data.val.is_empty() {
                None
            } else {
                Some(entropy(
                    &vi.predict(&data.val.x, t, child_seed(method_seed, "vi-val"))?
                        .mean_prediction(),
                ))
            };
            ClsEval {
                probs,
                entropies,
                val_entropies,
                sets: None,
                warnings: Vec::new(),
                model_files: vec![(
                    "vi.json".into(),
                    serde_json::to_string_pretty(&vi.model)?,
                )],
            }
        }
        "tta" => {
            let (clf, _) = fit_classifier_deterministic(train_x, train_labels, n_classes, &cfg, &tcfg)?;
            let mut augs = vec![Augmentation::Identity];
            for _ in 1..config.method.tta_members.max(2) {
                augs.push(Augmentation::GaussianJitter {
                    std: config.method.tta_std,
                });
            }
            let (probs, entropies) = predictive(
                predict_tta(&clf.model, &data.test.x, &augs, child_seed(method_seed, "tta-test"))?
                    .mean_prediction(),
            );
            let val_entropies = if data.val.is_empty() {
                None
            } else {
                Some(entropy(
                    &predict_tta(&clf.model, &data.val.x, &augs, child_seed(method_seed, "tta-val"))?
                        .mean_prediction(),
                ))
            };
            ClsEval {
                probs,
                entropies,
                val_entropies,
                sets: None,
                warnings: Vec::new(),
                model_files: vec![("model.json".into(), clf.model.save_string()?)],
            }
        }
        "temp_scaling" => {
            if data.val.is_empty() {
                return Err(HarnessError::Config(
                    "temp_scaling needs a non-empty validation split".into(),
                ));
            }
            let (clf, _) = fit_classifier_deterministic(train_x, train_labels, n_classes, &cfg, &tcfg)?;
            let (val_labels, _) = data.val.y.as_classification().expect("validated task");
            let temp = fit_temperature(&clf.logits(&data.val.x)?, val_labels)?;
            let scaled = temp.scale_logits(&clf.logits(&data.test.x)?);
            let (probs, entropies) = predictive(classification::softmax_rows(&scaled));
            let val_scaled = temp.scale_logits(&clf.logits(&data.val.x)?);
            let val_entropies = Some(entropy(&classification::softmax_rows(&val_scaled)));
            ClsEval {
                probs,
                entropies,
                val_entropies,
                sets: None,
                warnings: Vec::new(),
                model_files: vec![
                    ("model.json".into(), clf.model.save_string()?),
                    ("temperature.json".into(), serde_json::to_string_pretty(&temp)?),
                ],
            }
        }
        "raps" => {
            let (clf, _) = fit_classifier_deterministic(train_x, train_labels, n_classes, &cfg, &tcfg)?;
            let (calib_labels, _) = data
                .calib
                .y
                .as_classification()
                .ok_or_else(|| HarnessError::Config("raps needs classification targets".into()))?;
            let raps_cfg = RapsConfig {
                k_reg: config.method.k_reg,
                lambda: config.method.raps_lambda,
                randomized: config.method.randomized,
            };
            let calibration = raps_calibrate(
                &clf.predict(&data.calib.x)?,
                calib_labels,
                config.eval.alpha,
                raps_cfg,
                child_seed(method_seed, "raps"),
            )?;
            let (probs, entropies) = predictive(clf.predict(&data.test.x)?);
            let sets = raps_predict(&probs, &calibration);
            let val_entropies = if data.val.is_empty() {
                None
            } else {
                Some(entropy(&clf.predict(&data.val.x)?))
            };
            ClsEval {
                probs,
                entropies,
                val_entropies,
                sets: Some(sets),
                warnings: Vec::new(),
                model_files: vec![
                    ("model.json".into(), clf.model.save_string()?),
                    (
                        "conformal.json".into(),
                        serde_json::to_string_pretty(&calibration)?,
                    ),
                ],
            }
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown classification method {other:?}"
            )))
        }
    };
    eval.warnings.extend(warnings);
    Ok(eval)
}

fn classification_report(
    eval: &ClsEval,
    labels: &[usize],
    groups: Option<&[String]>,
    config: &ExperimentConfig,
) -> Result<ClassificationReport, HarnessError> {
    let mut report = base_classification_report(eval, labels, None)?;

    if let Some(val_entropies) = &eval.val_entropies {
        if !val_entropies.is_empty() {
            let threshold =
                metrics::type1_quantile(val_entropies, config.eval.selective_quantile)?;
            let argmax = eval.probs.argmax();
            let kept: Vec<usize> = (0..labels.len())
                .filter(|&i| eval.entropies[i] <= threshold)
                .collect();
            let kept_fraction = kept.len() as f64 / labels.len() as f64;
            let selective = if kept.is_empty() {
                SelectiveAccuracy {
                    threshold,
                    kept_fraction: 0.0,
                    accuracy_kept: None,
                    accuracy_delta: None,
                }
            } else {
                let acc_all = report.accuracy;
                let correct = kept.iter().filter(|&&i| argmax[i] == labels[i]).count();
                let acc_kept = correct as f64 / kept.len() as f64;
                SelectiveAccuracy {
                    threshold,
                    kept_fraction,
                    accuracy_kept: Some(acc_kept),
                    accuracy_delta: Some(acc_kept - acc_all),
                }
            };
            report.selective = Some(selective);
        }
    }

    if let Some(group_labels) = groups {
        let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, label) in group_labels.iter().enumerate() {
            by_group.entry(label.clone()).or_default().push(i);
        }
        for (label, idx) in by_group {
            report
                .groups
                .insert(label, base_classification_report(eval, labels, Some(&idx))?);
        }
    }
    Ok(report)
}

fn base_classification_report(
    eval: &ClsEval,
    labels: &[usize],
    subset: Option<&[usize]>,
) -> Result<ClassificationReport, HarnessError> {
    let indices: Vec<usize> = match subset {
        Some(idx) => idx.to_vec(),
        None => (0..labels.len()).collect(),
    };
    if indices.is_empty() {
        return Err(HarnessError::Config("empty evaluation subset".into()));
    }
    let argmax = eval.probs.argmax();
    let n = indices.len() as f64;
    let correct = indices.iter().filter(|&&i| argmax[i] == labels[i]).count();
    let nll = indices
        .iter()
        .map(|&i| -eval.probs.probs[i][labels[i]].max(1e-300).ln())
        .sum::<f64>()
        / n;
    let mean_entropy = indices.iter().map(|&i| eval.entropies[i]).sum::<f64>() / n;
    let mut report = ClassificationReport {
        accuracy: correct as f64 / n,
        nll,
        mean_entropy,
        ..ClassificationReport::default()
    };
    if let Some(sets) = &eval.sets {
        let covered = indices
            .iter()
            .filter(|&&i| sets.membership[i][labels[i]])
            .count();
        report.coverage = Some(covered as f64 / n);
        let sizes = sets.set_sizes();
        report.mean_set_size =
            Some(indices.iter().map(|&i| sizes[i] as f64).sum::<f64>() / n);
    }
    Ok(report)
}

/// Execute one experiment end to end and persist its artifacts under the
/// config's output directory.
pub fn run(config: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    config.validate()?;
    let started = std::time::Instant::now();
    let dataset = build_dataset(config)?;
    let parts = split(&dataset, &config.split.to_spec())?;
    if parts.train.is_empty() {
        return Err(HarnessError::Config("training split is empty".into()));
    }
    if parts.test.is_empty() {
        return Err(HarnessError::Config("test split is empty".into()));
    }

    let record = match config.task {
        TaskKind::Regression => {
            let eval = run_regression_method(config, &parts)?;
            let y_test = parts.test.y.as_regression().expect("validated task");
            let report =
                regression_report(&eval, y_test, parts.test.groups.as_deref(), config)?;
            let arrays = RegressionEvalArrays {
                y: y_test.to_vec(),
                mean: eval.mean.clone(),
                std: eval.gaussian.as_ref().map(|g| g.std.clone()),
                lo: eval.intervals.as_ref().map(|i| i.lo.clone()),
                hi: eval.intervals.as_ref().map(|i| i.hi.clone()),
                uncertainty: eval.uncertainty.clone(),
                group: parts.test.groups.clone(),
            };
            let record = RunRecord {
                library_version: env!("CARGO_PKG_VERSION").to_string(),
                method: config.method.name.clone(),
                task: config.task,
                seed: config.seed,
                method_seed: config.method_seed(),
                warnings: eval.warnings.clone(),
                config: config.clone(),
                report: TaskReport::Regression(report),
                timing_secs: started.elapsed().as_secs_f64(),
            };
            persist_run(&record, Some(&arrays), &eval.model_files)?;
            record
        }
        TaskKind::Classification => {
            let eval = run_classification_method(config, &parts)?;
            let (labels, _) = parts.test.y.as_classification().expect("validated task");
            let report =
                classification_report(&eval, labels, parts.test.groups.as_deref(), config)?;
            let record = RunRecord {
                library_version: env!("CARGO_PKG_VERSION").to_string(),
                method: config.method.name.clone(),
                task: config.task,
                seed: config.seed,
                method_seed: config.method_seed(),
                warnings: eval.warnings.clone(),
                config: config.clone(),
                report: TaskReport::Classification(report),
                timing_secs: started.elapsed().as_secs_f64(),
            };
            persist_run(&record, None, &eval.model_files)?;
            record
        }
    };
    Ok(record)
}

fn persist_run(
    record: &RunRecord,
    arrays: Option<&RegressionEvalArrays>,
    model_files: &[(String, String)],
) -> Result<(), HarnessError> {
    let dir = Path::new(&record.config.output);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), record.config.to_toml())?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&record.report)?,
    )?;
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(record)?)?;
    if let Some(arrays) = arrays {
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(arrays)?)?;
    }
    if !model_files.is_empty() {
        let model_dir = dir.join("model");
        std::fs::create_dir_all(&model_dir)?;
        for (name, contents) in model_files {
            std::fs::write(model_dir.join(name), contents)?;
        }
    }
    Ok(())
}
