//! Trained regression predictors: deterministic baseline, mean-variance
//! estimation, quantile regression, deep ensembles, and MC dropout.

use super::{GaussianPrediction, MixturePrediction, QuantilePrediction, RegressionError};
use crate::losses::{Loss, SCALE_FLOOR};
use crate::nn::{DropoutMode, MlpConfig, MlpModel};
use crate::rng::child_seed_indexed;
use crate::special::softplus;
use crate::tensor::Tensor;
use crate::train::{fit, FitTrace, TrainConfig};

/// Point-prediction baseline: single output column, squared-error loss.
#[derive(Debug, Clone)]
pub struct DeterministicPredictor {
    pub model: MlpModel,
}

impl DeterministicPredictor {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>, RegressionError> {
        let fwd = self.model.forward(x, DropoutMode::Off)?;
        Ok(fwd.output.data().to_vec())
    }
}

pub fn fit_deterministic(
    x: &Tensor,
    y: &[f64],
    model_config: &MlpConfig,
    train_config: &TrainConfig,
) -> Result<(DeterministicPredictor, FitTrace), RegressionError> {
    let mut model = MlpModel::build(model_config)?;
    let targets = crate::data::Targets::Regression(y.to_vec());
    let trace = fit(&mut model, x, &targets, &Loss::Mse, train_config, |_| {})?;
    Ok((DeterministicPredictor { model }, trace))
}

/// Gaussian head: column 0 is the mean, column 1 the raw std mapped
/// through softplus plus a floor.
#[derive(Debug, Clone)]
pub struct MvePredictor {
    pub model: MlpModel,
}

impl MvePredictor {
    pub fn predict(&self, x: &Tensor) -> Result<GaussianPrediction, RegressionError> {
        let fwd = self.model.forward(x, DropoutMode::Off)?;
        Ok(gaussian_from_output(&fwd.output))
    }
}

/// Read (mean, std) off a two-column MVE head output.
pub(crate) fn gaussian_from_output(output: &Tensor) -> GaussianPrediction {
    let n = output.rows().expect("mve head output is a matrix");
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for i in 0..n {
        mean.push(output.get2(i, 0));
        std.push(softplus(output.get2(i, 1)) + SCALE_FLOOR);
    }
    GaussianPrediction { mean, std }
}

pub fn fit_mve(
    x: &Tensor,
    y: &[f64],
    model_config: &MlpConfig,
    train_config: &TrainConfig,
) -> Result<(MvePredictor, FitTrace), RegressionError> {
    if model_config.output_dim != 2 {
        return Err(RegressionError::Invalid(format!(
            "mve needs output_dim 2 (mean, raw std), got {}",
            model_config.output_dim
        )));
    }
    let mut model = MlpModel::build(model_config)?;
    let targets = crate::data::Targets::Regression(y.to_vec());
    let trace = fit(&mut model, x, &targets, &Loss::GaussianNll, train_config, |_| {})?;
    Ok((MvePredictor { model }, trace))
}

/// Quantile head: one output column per level; predictions are repaired
/// to be non-decreasing by an ascending per-sample sort.
#[derive(Debug, Clone)]
pub struct QuantilePredictor {
    pub model: MlpModel,
    pub levels: Vec<f64>,
}

impl QuantilePredictor {
    pub fn predict(&self, x: &Tensor) -> Result<QuantilePrediction, RegressionError> {
        let fwd = self.model.forward(x, DropoutMode::Off)?;
        let n = fwd.output.rows()?;
        let values = (0..n)
            .map(|i| {
                let mut row = fwd.output.row(i).to_vec();
                row.sort_by(|a, b| a.partial_cmp(b).expect("finite quantiles"));
                row
            })
            .collect();
        Ok(QuantilePrediction {
            levels: self.levels.clone(),
            values,
        })
    }
}

pub fn fit_qr(
    x: &Tensor,
    y: &[f64],
    levels: &[f64],
    model_config: &MlpConfig,
    train_config: &TrainConfig,
) -> Result<(QuantilePredictor, FitTrace), RegressionError> {
    if model_config.output_dim != levels.len() {
        return Err(RegressionError::Invalid(format!(
            "quantile regression with {} levels needs output_dim {}, got {}",
            levels.len(),
            levels.len(),
            model_config.output_dim
        )));
    }
    let loss = Loss::Pinball {
        levels: levels.to_vec(),
    };
    let mut model = MlpModel::build(model_config)?;
    let targets = crate::data::Targets::Regression(y.to_vec());
    let trace = fit(&mut model, x, &targets, &loss, train_config, |_| {})?;
    Ok((QuantilePredictor {
        model,
        levels: levels.to_vec(),
    }, trace))
}

/// Evidential head predictor: four NIG columns.
#[derive(Debug, Clone)]
pub struct DerPredictor {
    pub model: MlpModel,
}

impl DerPredictor {
    pub fn predict(&self, x: &Tensor) -> Result<super::NigPrediction, RegressionError> {
        let fwd = self.model.forward(x, DropoutMode::Off)?;
        let n = fwd.output.rows()?;
        let mut nig = super::NigPrediction {
            gamma: Vec::with_capacity(n),
            nu: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            beta: Vec::with_capacity(n),
        };
        for i in 0..n {
            nig.gamma.push(fwd.output.get2(i, 0));
            nig.nu.push(softplus(fwd.output.get2(i, 1)) + SCALE_FLOOR);
            nig.alpha.push(softplus(fwd.output.get2(i, 2)) + 1.0 + SCALE_FLOOR);
            nig.beta.push(softplus(fwd.output.get2(i, 3)) + SCALE_FLOOR);
        }
        Ok(nig)
    }
}

/// Fit a deep-evidential-regression head.
pub fn fit_der(
    x: &Tensor,
    y: &[f64],
    lambda: f64,
    model_config: &MlpConfig,
    train_config: &TrainConfig,
) -> Result<(DerPredictor, FitTrace), RegressionError> {
    if model_config.output_dim != 4 {
        return Err(RegressionError::Invalid(format!(
            "der needs output_dim 4 (gamma, nu, alpha, beta), got {}",
            model_config.output_dim
        )));
    }
    let mut model = MlpModel::build(model_config)?;
    let targets = crate::data::Targets::Regression(y.to_vec());
    let trace = fit(&mut model, x, &targets, &Loss::Der { lambda }, train_config, |_| {})?;
    Ok((DerPredictor { model }, trace))
}

/// Deep ensemble of independently initialized MVE networks.
#[derive(Debug, Clone)]
pub struct EnsemblePredictor {
    pub members: Vec<MvePredictor>,
}

impl EnsemblePredictor {
    pub fn predict(&self, x: &Tensor) -> Result<MixturePrediction, RegressionError> {
        let mut member_means = Vec::with_capacity(self.members.len());
        let mut member_stds = Vec::with_capacity(self.members.len());
        for member in &self.members {
            let g = member.predict(x)?;
            member_means.push(g.mean);
            member_stds.push(g.std);
        }
        Ok(MixturePrediction {
            member_means,
            member_stds,
        })
    }
}

/// Train `m >= 2` MVE members; member `i` derives its init and shuffle
/// seeds from `(base_seed, i)`, so the ensemble is reproducible while the
/// members stay independent.
pub fn fit_ensemble(
    x: &Tensor,
    y: &[f64],
    model_config: &MlpConfig,
    train_config: &TrainConfig,
    m: usize,
    base_seed: u64,
) -> Result<(EnsemblePredictor, Vec<FitTrace>), RegressionError> {
    if m < 2 {
        return Err(RegressionError::Invalid(format!(
            "deep ensemble needs at least 2 members, got {m}"
        )));
    }
    let mut members = Vec::with_capacity(m);
    let mut traces = Vec::with_capacity(m);
    for i in 0..m {
        let mut cfg = model_config.clone();
        cfg.init_seed = child_seed_indexed(base_seed, "member-init", i);
        let mut tcfg = train_config.clone();
        tcfg.seed = child_seed_indexed(base_seed, "member-train", i);
        let (member, trace) = fit_mve(x, y, &cfg, &tcfg)?;
        members.push(member);
        traces.push(trace);
    }
    Ok((EnsemblePredictor { members }, traces))
}

/// `t` stochastic forward passes through an MVE model with dropout left
/// on; each pass contributes one mixture member. With every dropout rate
/// zero the members collapse and the epistemic term degenerates to zero
/// (callers can check [`MlpModel::has_dropout`] up front).
pub fn predict_mc_dropout(
    model: &MlpModel,
    x: &Tensor,
    t: usize,
    seed: u64,
) -> Result<MixturePrediction, RegressionError> {
    if t < 2 {
        return Err(RegressionError::Invalid(format!(
            "mc dropout needs at least 2 passes, got {t}"
        )));
    }
    if model.output_dim() != 2 {
        return Err(RegressionError::Invalid(format!(
            "mc dropout expects an mve head (2 outputs), got {}",
            model.output_dim()
        )));
    }
    let mut member_means = Vec::with_capacity(t);
    let mut member_stds = Vec::with_capacity(t);
    for pass in 0..t {
        let mode = DropoutMode::Sampled {
            seed: child_seed_indexed(seed, "mc-pass", pass),
        };
        let fwd = model.forward(x, mode)?;
        let g = gaussian_from_output(&fwd.output);
        member_means.push(g.mean);
        member_stds.push(g.std);
    }
    Ok(MixturePrediction {
        member_means,
        member_stds,
    })
}
