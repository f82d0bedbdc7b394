//! Last-layer Laplace approximation with a Gauss-Newton posterior.
//!
//! Only the mean head's final weight column (plus bias) goes Bayesian:
//! with features `phi(x)` from the trained network and `phi~ = [phi; 1]`,
//! the posterior precision is
//! `(1/sigma_n^2) sum_i phi~_i phi~_i^T + prior_precision I`
//! for the fixed-noise modes, or the per-point `1/sigma_i^2` weighting
//! when the MVE head supplies heteroscedastic noise. The predictive
//! distribution keeps the MAP mean and adds `phi~^T Cov phi~` of
//! epistemic variance on top of the noise.

use super::{GaussianPrediction, RegressionError};
use crate::losses::SCALE_FLOOR;
use crate::nn::{DropoutMode, MlpModel};
use crate::special::softplus;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Observation-noise handling for the Gauss-Newton sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplaceNoise {
    /// Known, homoscedastic noise variance.
    Fixed(f64),
    /// Homoscedastic noise estimated as the mean squared training
    /// residual (the default).
    EstimateFromResiduals,
    /// Per-point variance read off the model's MVE std head.
    MveHead,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaplacePosterior {
    /// MAP weights of the mean output: feature weights then bias.
    pub map_weights: Vec<f64>,
    /// Row-major `(feature_dim + 1)^2` posterior covariance.
    pub cov: Vec<f64>,
    /// Homoscedastic noise variance (mean residual variance when the MVE
    /// head drives the GGN sum).
    pub noise_var: f64,
    pub prior_precision: f64,
    pub noise_mode: LaplaceNoise,
}

impl LaplacePosterior {
    pub fn dim(&self) -> usize {
        self.map_weights.len()
    }

    /// `phi~^T Cov phi~` for one feature row with the bias appended.
    #[allow(clippy::needless_range_loop)] // index d-1 is the implicit bias slot
    pub fn epistemic_variance(&self, features: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(features.len() + 1, d);
        let mut quad = 0.0;
        for i in 0..d {
            let fi = if i + 1 == d { 1.0 } else { features[i] };
            let mut row = 0.0;
            for j in 0..d {
                let fj = if j + 1 == d { 1.0 } else { features[j] };
                row += self.cov[i * d + j] * fj;
            }
            quad += fi * row;
        }
        quad
    }

    /// Total predictive variance `sigma_n^2 + phi~^T Cov phi~`.
    pub fn predictive_variance(&self, features: &[f64], noise_var: f64) -> f64 {
        noise_var + self.epistemic_variance(features)
    }
}

#[derive(Debug, Clone)]
pub struct LaplacePredictor {
    pub model: MlpModel,
    pub posterior: LaplacePosterior,
}

impl LaplacePredictor {
    pub fn predict(&self, x: &Tensor) -> Result<GaussianPrediction, RegressionError> {
        let fwd = self.model.forward(x, DropoutMode::Off)?;
        let n = x.rows()?;
        let mut mean = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        for i in 0..n {
            mean.push(fwd.output.get2(i, 0));
            let noise = match self.posterior.noise_mode {
                LaplaceNoise::MveHead => {
                    let s = softplus(fwd.output.get2(i, 1)) + SCALE_FLOOR;
                    s * s
                }
                _ => self.posterior.noise_var,
            };
            let var = self.posterior.predictive_variance(fwd.features.row(i), noise);
            std.push(var.max(0.0).sqrt());
        }
        Ok(GaussianPrediction { mean, std })
    }
}

/// Fit the last-layer posterior of a trained model (deterministic or MVE
/// head; the MVE head is required for [`LaplaceNoise::MveHead`]).
pub fn fit_laplace_last_layer(
    model: &MlpModel,
    x: &Tensor,
    y: &[f64],
    prior_precision: f64,
    noise: LaplaceNoise,
) -> Result<LaplacePredictor, RegressionError> {
    if prior_precision <= 0.0 {
        return Err(RegressionError::Invalid(format!(
            "prior precision must be positive, got {prior_precision}"
        )));
    }
    if matches!(noise, LaplaceNoise::MveHead) && model.output_dim() != 2 {
        return Err(RegressionError::Invalid(
            "mve-head noise mode needs a 2-column output head".into(),
        ));
    }
    let n = x.rows()?;
    if n == 0 || y.len() != n {
        return Err(RegressionError::Invalid(format!(
            "need matching non-empty features and targets ({n} rows, {} targets)",
            y.len()
        )));
    }

    let fwd = model.forward(x, DropoutMode::Off)?;
    let f = model.feature_dim();
    let d = f + 1;

    // Residual variance backs both the estimated mode and the reported
    // homoscedastic noise in the MVE mode.
    let mss: f64 = (0..n)
        .map(|i| {
            let r = y[i] - fwd.output.get2(i, 0);
            r * r
        })
        .sum::<f64>()
        / n as f64;
    let noise_var = match noise {
        LaplaceNoise::Fixed(v) => {
            if v <= 0.0 {
                return Err(RegressionError::Invalid(format!(
                    "fixed noise variance must be positive, got {v}"
                )));
            }
            v
        }
        _ => mss.max(1e-12),
    };

    // Precision = prior I + sum_i phi~ phi~^T / sigma_i^2.
    let mut precision = vec![0.0; d * d];
    for i in 0..d {
        precision[i * d + i] = prior_precision;
    }
    let mut phi = vec![0.0; d];
    for row in 0..n {
        phi[..f].copy_from_slice(fwd.features.row(row));
        phi[f] = 1.0;
        let w = match noise {
            LaplaceNoise::MveHead => {
                let s = softplus(fwd.output.get2(row, 1)) + SCALE_FLOOR;
                1.0 / (s * s)
            }
            _ => 1.0 / noise_var,
        };
        for i in 0..d {
            let pi = phi[i] * w;
            if pi == 0.0 {
                continue;
            }
            for j in 0..d {
                precision[i * d + j] += pi * phi[j];
            }
        }
    }

    let chol = cholesky(&precision, d).ok_or_else(|| {
        RegressionError::Invalid("posterior precision is not positive definite".into())
    })?;
    let cov = invert_from_cholesky(&chol, d);

    // MAP weights: mean-column of the output layer plus its bias.
    let out_layer = model
        .layers()
        .last()
        .expect("model has at least one layer");
    let out_cols = out_layer.weights.cols()?;
    let mut map_weights = Vec::with_capacity(d);
    for j in 0..f {
        map_weights.push(out_layer.weights.data()[j * out_cols]);
    }
    map_weights.push(out_layer.bias.data()[0]);

    Ok(LaplacePredictor {
        model: model.clone(),
        posterior: LaplacePosterior {
            map_weights,
            cov,
            noise_var,
            prior_precision,
            noise_mode: noise,
        },
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix; `None` when a pivot is not strictly positive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Invert `A = L L^T` column by column via forward/back substitution.
fn invert_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for c in 0..n {
        // Solve L z = e_c.
        for i in 0..n {
            let mut sum = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[i * n + k] * col[k];
            }
            col[i] = sum / l[i * n + i];
        }
        // Solve L^T x = z.
        for i in (0..n).rev() {
            let mut sum = col[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * col[k];
            }
            col[i] = sum / l[i * n + i];
        }
        for i in 0..n {
            inv[i * n + c] = col[i];
        }
    }
    // Symmetrize against round-off drift.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = avg;
            inv[j * n + i] = avg;
        }
    }
    inv
}
