//! Stochastic weight averaging Gaussian: fit a Gaussian to SGD iterates.
//!
//! After pre-training to a mode, a second constant-learning-rate SGD
//! phase snapshots the flattened parameter vector once per epoch.
//! [`SwagStats`] keeps the running first and second moments plus the last
//! `K` deviation columns; [`swag_sample_predict`] draws parameter vectors
//! from the half diagonal / half low-rank Gaussian and turns each into
//! one mixture member.

use super::fit::gaussian_from_output;
use super::{MixturePrediction, RegressionError};
use crate::data::Targets;
use crate::losses::Loss;
use crate::nn::{DropoutMode, MlpModel};
use crate::rng::{child_seed_indexed, Rng};
use crate::tensor::Tensor;
use crate::train::{fit, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

/// Running SWAG moments over parameter snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwagStats {
    /// Running mean of snapshots.
    pub mean: Vec<f64>,
    /// Running mean of element-wise squared snapshots.
    pub second_moment: Vec<f64>,
    /// Last `max_columns` centered snapshots, oldest first. Column `i`
    /// stores the snapshot minus the running mean at the time it was
    /// taken.
    pub deviations: Vec<Vec<f64>>,
    pub snapshots: usize,
    pub max_columns: usize,
}

impl SwagStats {
    pub fn new(dim: usize, max_columns: usize) -> Self {
        SwagStats {
            mean: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            deviations: Vec::new(),
            snapshots: 0,
            max_columns,
        }
    }

    /// Fold one snapshot into the running moments and deviation columns.
    /// Incremental (Welford-style) updates keep constant snapshot streams
    /// exactly constant, so a zero-learning-rate run reports exactly zero
    /// variance.
    pub fn record(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.mean.len(), "snapshot dimension changed");
        let count = (self.snapshots + 1) as f64;
        for ((m, m2), p) in self.mean.iter_mut().zip(&mut self.second_moment).zip(params) {
            *m += (p - *m) / count;
            *m2 += (p * p - *m2) / count;
        }
        self.snapshots += 1;
        let column: Vec<f64> = params.iter().zip(&self.mean).map(|(p, m)| p - m).collect();
        self.deviations.push(column);
        if self.deviations.len() > self.max_columns {
            self.deviations.remove(0);
        }
    }

    /// Element-wise `max(0, E[theta^2] - mean^2)`.
    pub fn diag_variance(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.second_moment)
            .map(|(m, s)| (s - m * m).max(0.0))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Run the constant-learning-rate SGD exploration phase and collect
/// snapshots. `model` must already be trained to a mode; it is perturbed
/// in place by the exploration epochs.
#[allow(clippy::too_many_arguments)]
pub fn swag_collect(
    model: &mut MlpModel,
    x: &Tensor,
    y: &Targets,
    loss: &Loss,
    snapshot_epochs: usize,
    k: usize,
    swag_lr: f64,
    base: &TrainConfig,
) -> Result<SwagStats, RegressionError> {
    if k < 2 {
        return Err(RegressionError::Invalid(format!(
            "swag needs at least 2 deviation columns, got k={k}"
        )));
    }
    if snapshot_epochs < k {
        return Err(RegressionError::Invalid(format!(
            "snapshot epochs ({snapshot_epochs}) must be at least k ({k})"
        )));
    }
    let mut stats = SwagStats::new(model.flatten_params().len(), k);
    let config = TrainConfig {
        epochs: snapshot_epochs,
        learning_rate: swag_lr,
        optimizer: OptimizerKind::Sgd,
        ..base.clone()
    };
    fit(model, x, y, loss, &config, |snap| {
        stats.record(&snap.model.flatten_params());
    })?;
    Ok(stats)
}

/// Draw `s` parameter vectors
/// `theta = mean + (scale/sqrt 2) sqrt(diag var) z1
///        + (scale/sqrt(2(K-1))) D z2`
/// and run each through the MVE-head template, yielding one mixture
/// member per draw.
pub fn swag_sample_predict(
    stats: &SwagStats,
    template: &MlpModel,
    x: &Tensor,
    s: usize,
    seed: u64,
    scale: f64,
) -> Result<MixturePrediction, RegressionError> {
    if s < 2 {
        return Err(RegressionError::Invalid(format!(
            "swag sampling needs at least 2 draws, got {s}"
        )));
    }
    if template.output_dim() != 2 {
        return Err(RegressionError::Invalid(format!(
            "swag template must carry an mve head (2 outputs), got {}",
            template.output_dim()
        )));
    }
    if template.flatten_params().len() != stats.dim() {
        return Err(RegressionError::Invalid(format!(
            "template has {} parameters, stats cover {}",
            template.flatten_params().len(),
            stats.dim()
        )));
    }
    let diag_std: Vec<f64> = stats.diag_variance().iter().map(|v| v.sqrt()).collect();
    let k = stats.deviations.len();
    let diag_coeff = scale / 2.0_f64.sqrt();
    let lowrank_coeff = if k > 1 {
        scale / (2.0 * (k as f64 - 1.0)).sqrt()
    } else {
        0.0
    };

    let mut member_means = Vec::with_capacity(s);
    let mut member_stds = Vec::with_capacity(s);
    let mut work = template.clone();
    for draw in 0..s {
        let mut rng = Rng::new(child_seed_indexed(seed, "swag-draw", draw));
        let mut theta = stats.mean.clone();
        for (t, d) in theta.iter_mut().zip(&diag_std) {
            *t += diag_coeff * d * rng.normal();
        }
        if lowrank_coeff != 0.0 {
            for column in &stats.deviations {
                let z = rng.normal();
                for (t, c) in theta.iter_mut().zip(column) {
                    *t += lowrank_coeff * z * c;
                }
            }
        }
        work.load_flat_params(&theta)?;
        let fwd = work.forward(x, DropoutMode::Off)?;
        let g = gaussian_from_output(&fwd.output);
        member_means.push(g.mean);
        member_stds.push(g.std);
    }
    Ok(MixturePrediction {
        member_means,
        member_stds,
    })
}
