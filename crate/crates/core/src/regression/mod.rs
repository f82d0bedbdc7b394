//! Regression UQ methods and their predictive distributions.
//!
//! Every method ends in one of four distribution families: a Gaussian
//! (mean/std per sample), a set of quantiles, a uniform-weight Gaussian
//! mixture (ensembles, MC dropout, SWAG, variational inference), or a
//! Normal-Inverse-Gamma (evidential regression). Mixtures and NIG reduce
//! to Gaussian moments through [`mixture_moments`] / [`nig_moments`] so
//! the metrics stack sees a single interface.

mod fit;
mod laplace;
mod swag;
mod vi;

pub use fit::{
    fit_der, fit_deterministic, fit_ensemble, fit_mve, fit_qr, predict_mc_dropout,
    DerPredictor, DeterministicPredictor, EnsemblePredictor, MvePredictor, QuantilePredictor,
};
pub use laplace::{fit_laplace_last_layer, LaplaceNoise, LaplacePosterior, LaplacePredictor};
pub use swag::{swag_collect, swag_sample_predict, SwagStats};
pub(crate) use vi::fit_vi as fit_vi_with_loss;
pub use vi::{fit_bnn_vi_elbo, ViConfig, ViFit, ViLayer, ViModel, ViPredictor};

use crate::nn::NnError;
use crate::tensor::TensorError;
use crate::train::TrainError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-sample Gaussian predictive distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    /// Strictly positive standard deviations.
    pub std: Vec<f64>,
}

impl GaussianPrediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Per-sample variance.
    pub fn variance(&self) -> Vec<f64> {
        self.std.iter().map(|s| s * s).collect()
    }
}

/// Per-sample predicted quantiles at strictly ascending levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePrediction {
    pub levels: Vec<f64>,
    /// `values[sample][level]`, non-decreasing across levels per sample.
    pub values: Vec<Vec<f64>>,
}

impl QuantilePrediction {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One quantile column.
    pub fn column(&self, level_idx: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[level_idx]).collect()
    }

    /// Restrict to two levels (CQR feeds on a lower/upper pair).
    pub fn pair(&self, lo_idx: usize, hi_idx: usize) -> QuantilePrediction {
        QuantilePrediction {
            levels: vec![self.levels[lo_idx], self.levels[hi_idx]],
            values: self
                .values
                .iter()
                .map(|row| vec![row[lo_idx], row[hi_idx]])
                .collect(),
        }
    }
}

/// Uniform-weight Gaussian mixture: `member_means[m][i]` is member `m`'s
/// mean for sample `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePrediction {
    pub member_means: Vec<Vec<f64>>,
    pub member_stds: Vec<Vec<f64>>,
}

impl MixturePrediction {
    pub fn members(&self) -> usize {
        self.member_means.len()
    }

    pub fn len(&self) -> usize {
        self.member_means.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normal-Inverse-Gamma parameters per sample (evidential regression).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NigPrediction {
    pub gamma: Vec<f64>,
    pub nu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NigPrediction {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

/// Per-sample aleatoric/epistemic split of a mixture: aleatoric is the
/// mean member variance, epistemic the (population) variance of member
/// means, computed in two passes so it is non-negative by construction.
pub fn mixture_decompose(mix: &MixturePrediction) -> Result<(Vec<f64>, Vec<f64>), RegressionError> {
    let m = mix.members();
    if m == 0 {
        return Err(RegressionError::Invalid("mixture needs at least one member".into()));
    }
    let n = mix.len();
    let mut aleatoric = vec![0.0; n];
    let mut epistemic = vec![0.0; n];
    for i in 0..n {
        let mut mean_var = 0.0;
        let mut mean_mu = 0.0;
        for mm in 0..m {
            let s = mix.member_stds[mm][i];
            mean_var += s * s;
            mean_mu += mix.member_means[mm][i];
        }
        mean_var /= m as f64;
        mean_mu /= m as f64;
        let mut var_mu = 0.0;
        for mm in 0..m {
            let d = mix.member_means[mm][i] - mean_mu;
            var_mu += d * d;
        }
        var_mu /= m as f64;
        aleatoric[i] = mean_var;
        epistemic[i] = var_mu;
    }
    Ok((aleatoric, epistemic))
}

/// Moment-match a mixture to a single Gaussian. The total variance is
/// defined as `aleatoric + epistemic` from [`mixture_decompose`], so the
/// decomposition identity holds exactly.
pub fn mixture_moments(mix: &MixturePrediction) -> Result<GaussianPrediction, RegressionError> {
    if mix.members() == 1 {
        return Ok(GaussianPrediction {
            mean: mix.member_means[0].clone(),
            std: mix.member_stds[0].clone(),
        });
    }
    let (aleatoric, epistemic) = mixture_decompose(mix)?;
    let m = mix.members();
    let n = mix.len();
    let mut mean = vec![0.0; n];
    for member in &mix.member_means {
        for (acc, v) in mean.iter_mut().zip(member) {
            *acc += v;
        }
    }
    for acc in &mut mean {
        *acc /= m as f64;
    }
    let std = aleatoric
        .iter()
        .zip(&epistemic)
        .map(|(a, e)| (a + e).max(0.0).sqrt())
        .collect();
    Ok(GaussianPrediction { mean, std })
}

/// Moments of the NIG predictive distribution.
#[derive(Debug, Clone)]
pub struct NigMoments {
    pub mean: Vec<f64>,
    pub aleatoric_var: Vec<f64>,
    pub epistemic_var: Vec<f64>,
}

impl NigMoments {
    /// Gaussian reduction with total variance aleatoric + epistemic.
    pub fn to_gaussian(&self) -> GaussianPrediction {
        GaussianPrediction {
            mean: self.mean.clone(),
            std: self
                .aleatoric_var
                .iter()
                .zip(&self.epistemic_var)
                .map(|(a, e)| (a + e).max(0.0).sqrt())
                .collect(),
        }
    }
}

/// Closed-form NIG moments: `E[y] = gamma`, aleatoric `beta/(alpha-1)`,
/// epistemic `beta/(nu (alpha-1))`. Requires `alpha > 1`.
pub fn nig_moments(nig: &NigPrediction) -> Result<NigMoments, RegressionError> {
    let n = nig.len();
    let mut aleatoric = Vec::with_capacity(n);
    let mut epistemic = Vec::with_capacity(n);
    for i in 0..n {
        let (nu, alpha, beta) = (nig.nu[i], nig.alpha[i], nig.beta[i]);
        if alpha <= 1.0 {
            return Err(RegressionError::Invalid(format!(
                "nig moments need alpha > 1, got {alpha} at sample {i}"
            )));
        }
        if nu <= 0.0 || beta <= 0.0 {
            return Err(RegressionError::Invalid(format!(
                "nig moments need nu, beta > 0 (nu={nu}, beta={beta} at sample {i})"
            )));
        }
        aleatoric.push(beta / (alpha - 1.0));
        epistemic.push(beta / (nu * (alpha - 1.0)));
    }
    Ok(NigMoments {
        mean: nig.gamma.clone(),
        aleatoric_var: aleatoric,
        epistemic_var: epistemic,
    })
}
