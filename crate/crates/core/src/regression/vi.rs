//! Bayes-by-backprop variational inference over network weights.
//!
//! Every weight gets a Gaussian posterior `N(mu, softplus(rho)^2)`,
//! trained by reparameterized samples (`w = mu + softplus(rho) eps`)
//! against the ELBO: expected data NLL plus `kl_weight`-scaled closed-form
//! KL to a zero-mean isotropic prior, divided by the training-set size.
//! Frozen layers stay deterministic point weights, which is what partial
//! stochasticity means here.

use super::fit::gaussian_from_output;
use super::{MixturePrediction, RegressionError};
use crate::data::Targets;
use crate::losses::{kl_gaussian_on_tape, Loss};
use crate::nn::{Activation, MlpConfig, MlpModel};
use crate::rng::{child_seed, child_seed_indexed, Rng};
use crate::special::softplus_inv;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::train::{gather_batch, Batcher, OptimState, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViConfig {
    /// Prior standard deviation `s` in `N(0, s^2)`.
    pub prior_std: f64,
    /// ELBO beta: weight on the KL term.
    pub kl_weight: f64,
    /// Reparameterized samples per batch during training.
    pub mc_train_samples: usize,
    /// Initial posterior standard deviation.
    pub init_sigma: f64,
    /// Per-layer freeze flags (deterministic layers); all-stochastic when
    /// absent.
    pub frozen_layers: Option<Vec<bool>>,
}

impl Default for ViConfig {
    fn default() -> Self {
        ViConfig {
            prior_std: 1.0,
            kl_weight: 1.0,
            mc_train_samples: 1,
            init_sigma: 0.05,
            frozen_layers: None,
        }
    }
}

/// Variational parameters of one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViLayer {
    pub mu_w: Tensor,
    pub rho_w: Tensor,
    pub mu_b: Tensor,
    pub rho_b: Tensor,
    pub activation: Option<Activation>,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViModel {
    pub layers: Vec<ViLayer>,
    pub prior_std: f64,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ViModel {
    /// Initialize means from the usual fan-in scheme and every rho so
    /// that `softplus(rho) = init_sigma`.
    pub fn build(config: &MlpConfig, vi: &ViConfig) -> Result<Self, RegressionError> {
        if vi.prior_std <= 0.0 {
            return Err(RegressionError::Invalid(format!(
                "prior std must be positive, got {}",
                vi.prior_std
            )));
        }
        if vi.kl_weight < 0.0 {
            return Err(RegressionError::Invalid(format!(
                "kl weight must be non-negative, got {}",
                vi.kl_weight
            )));
        }
        if vi.mc_train_samples == 0 {
            return Err(RegressionError::Invalid(
                "need at least one training sample per batch".into(),
            ));
        }
        if vi.init_sigma <= 0.0 {
            return Err(RegressionError::Invalid(format!(
                "initial sigma must be positive, got {}",
                vi.init_sigma
            )));
        }
        let seed_model = MlpModel::build(config)?;
        let n_layers = seed_model.num_layers();
        let frozen = match &vi.frozen_layers {
            Some(flags) => {
                if flags.len() != n_layers {
                    return Err(RegressionError::Invalid(format!(
                        "{} freeze flags for {n_layers} layers",
                        flags.len()
                    )));
                }
                flags.clone()
            }
            None => vec![false; n_layers],
        };
        let rho0 = softplus_inv(vi.init_sigma);
        let layers = seed_model
            .layers()
            .iter()
            .zip(&frozen)
            .map(|(layer, f)| ViLayer {
                mu_w: layer.weights.clone(),
                rho_w: layer.weights.map("rho_init", |_| rho0).expect("finite"),
                mu_b: layer.bias.clone(),
                rho_b: layer.bias.map("rho_init", |_| rho0).expect("finite"),
                activation: layer.activation,
                frozen: *f,
            })
            .collect();
        Ok(ViModel {
            layers,
            prior_std: vi.prior_std,
            input_dim: config.input_dim,
            output_dim: config.output_dim,
        })
    }

    /// Plain forward pass with one reparameterized weight sample.
    pub fn forward_sample(&self, x: &Tensor, seed: u64) -> Result<Tensor, RegressionError> {
        let n = x.rows()?;
        let mut h = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut rng = Rng::new(child_seed_indexed(seed, "vi-layer", li));
            let w = sample_tensor(&layer.mu_w, &layer.rho_w, layer.frozen, &mut rng);
            let b = sample_tensor(&layer.mu_b, &layer.rho_b, layer.frozen, &mut rng);
            let mut z = h.matmul(&w)?;
            let cols = b.len();
            let zdata = z.data_mut();
            for i in 0..n {
                for j in 0..cols {
                    zdata[i * cols + j] += b.data()[j];
                }
            }
            if let Some(act) = layer.activation {
                z = match act {
                    Activation::Relu => z.map("relu", |v| v.max(0.0))?,
                    Activation::Tanh => z.map("tanh", f64::tanh)?,
                };
            }
            h = z;
        }
        Ok(h)
    }
}

fn sample_tensor(mu: &Tensor, rho: &Tensor, frozen: bool, rng: &mut Rng) -> Tensor {
    if frozen {
        return mu.clone();
    }
    let data: Vec<f64> = mu
        .data()
        .iter()
        .zip(rho.data())
        .map(|(m, r)| m + crate::special::softplus(*r) * rng.normal())
        .collect();
    Tensor::from_vec(mu.shape().to_vec(), data).expect("shape preserved")
}

/// Node ids for one stochastic layer on a training tape.
struct LayerNodes {
    mu_w: VarId,
    sigma_w: VarId,
    mu_b: VarId,
    sigma_b: VarId,
    frozen_w: Option<VarId>,
    frozen_b: Option<VarId>,
}

#[derive(Debug, Clone)]
pub struct ViPredictor {
    pub model: ViModel,
}

impl ViPredictor {
    /// Draw `t` weight samples; each forward pass through the MVE head
    /// contributes one mixture member.
    pub fn predict(
        &self,
        x: &Tensor,
        t: usize,
        seed: u64,
    ) -> Result<MixturePrediction, RegressionError> {
        if t < 2 {
            return Err(RegressionError::Invalid(format!(
                "vi prediction needs at least 2 samples, got {t}"
            )));
        }
        let mut member_means = Vec::with_capacity(t);
        let mut member_stds = Vec::with_capacity(t);
        for pass in 0..t {
            let out = self
                .model
                .forward_sample(x, child_seed_indexed(seed, "vi-pass", pass))?;
            let g = gaussian_from_output(&out);
            member_means.push(g.mean);
            member_stds.push(g.std);
        }
        Ok(MixturePrediction {
            member_means,
            member_stds,
        })
    }
}

#[derive(Debug)]
pub struct ViFit {
    pub predictor: ViPredictor,
    /// Mean ELBO loss per epoch.
    pub elbo_trace: Vec<f64>,
}

/// Train a variational MVE regressor.
pub fn fit_bnn_vi_elbo(
    x: &Tensor,
    y: &[f64],
    model_config: &MlpConfig,
    train_config: &TrainConfig,
    vi_config: &ViConfig,
) -> Result<ViFit, RegressionError> {
    if model_config.output_dim != 2 {
        return Err(RegressionError::Invalid(format!(
            "vi regression needs an mve head (2 outputs), got {}",
            model_config.output_dim
        )));
    }
    let targets = Targets::Regression(y.to_vec());
    let (model, trace) = fit_vi(
        x,
        &targets,
        &Loss::GaussianNll,
        model_config,
        train_config,
        vi_config,
    )?;
    Ok(ViFit {
        predictor: ViPredictor { model },
        elbo_trace: trace,
    })
}

/// Shared ELBO training loop (regression and classification call this
/// with their data term).
pub(crate) fn fit_vi(
    x: &Tensor,
    y: &Targets,
    data_loss: &Loss,
    model_config: &MlpConfig,
    train_config: &TrainConfig,
    vi_config: &ViConfig,
) -> Result<(ViModel, Vec<f64>), RegressionError> {
    let mut model = ViModel::build(model_config, vi_config)?;
    let n = y.len();
    if n == 0 {
        return Err(RegressionError::Invalid("training set is empty".into()));
    }
    if train_config.batch_size == 0 || train_config.batch_size > n {
        return Err(RegressionError::Invalid(format!(
            "batch size {} must lie in [1, {n}]",
            train_config.batch_size
        )));
    }

    // Slot layout: (mu_w, rho_w, mu_b, rho_b) per stochastic layer.
    let mut slot_sizes = Vec::new();
    for layer in model.layers.iter().filter(|l| !l.frozen) {
        slot_sizes.extend([
            layer.mu_w.len(),
            layer.rho_w.len(),
            layer.mu_b.len(),
            layer.rho_b.len(),
        ]);
    }
    if slot_sizes.is_empty() {
        return Err(RegressionError::Invalid(
            "all layers frozen: nothing to infer".into(),
        ));
    }
    let mut opt = OptimState::new(
        train_config.optimizer,
        train_config.learning_rate,
        &slot_sizes,
    );
    let skip = vec![false; slot_sizes.len()];
    let batcher = Batcher::new(n, train_config.batch_size, train_config.shuffle, train_config.seed);
    let eps_seed = child_seed(train_config.seed, "vi-eps");
    let kl_scale = vi_config.kl_weight / n as f64;

    let mut trace = Vec::with_capacity(train_config.epochs);
    for epoch in 0..train_config.epochs {
        let mut epoch_loss = 0.0;
        for (bi, batch) in batcher.epoch_batches(epoch).into_iter().enumerate() {
            let (xb, yb) = gather_batch(x, y, &batch);
            let batch_seed =
                child_seed_indexed(child_seed_indexed(eps_seed, "epoch", epoch), "batch", bi);

            let step = (|| -> Result<f64, TrainError> {
                let mut tape = Tape::new();
                let rows = batch.len();
                let xid = tape.constant(xb.clone());

                // Register variational parameters once per batch.
                let mut nodes = Vec::with_capacity(model.layers.len());
                for layer in &model.layers {
                    if layer.frozen {
                        let w = tape.constant(layer.mu_w.clone());
                        let b = tape.constant(layer.mu_b.clone());
                        nodes.push(LayerNodes {
                            mu_w: w,
                            sigma_w: w,
                            mu_b: b,
                            sigma_b: b,
                            frozen_w: Some(w),
                            frozen_b: Some(b),
                        });
                    } else {
                        let mu_w = tape.param(layer.mu_w.clone());
                        let rho_w = tape.param(layer.rho_w.clone());
                        let mu_b = tape.param(layer.mu_b.clone());
                        let rho_b = tape.param(layer.rho_b.clone());
                        let sigma_w = tape.softplus(rho_w)?;
                        let sigma_b = tape.softplus(rho_b)?;
                        nodes.push(LayerNodes {
                            mu_w,
                            sigma_w,
                            mu_b,
                            sigma_b,
                            frozen_w: None,
                            frozen_b: None,
                        });
                    }
                }

                // Averaged data term over reparameterized samples.
                let mut data_term: Option<VarId> = None;
                for s in 0..vi_config.mc_train_samples {
                    let mut rng = Rng::new(child_seed_indexed(batch_seed, "sample", s));
                    let mut h = xid;
                    for (layer, node) in model.layers.iter().zip(&nodes) {
                        let w = match node.frozen_w {
                            Some(w) => w,
                            None => {
                                let eps: Vec<f64> =
                                    (0..layer.mu_w.len()).map(|_| rng.normal()).collect();
                                let eps = tape.constant(
                                    Tensor::from_vec(layer.mu_w.shape().to_vec(), eps)
                                        .expect("shape preserved"),
                                );
                                let noise = tape.mul(node.sigma_w, eps)?;
                                tape.add(node.mu_w, noise)?
                            }
                        };
                        let b = match node.frozen_b {
                            Some(b) => b,
                            None => {
                                let eps: Vec<f64> =
                                    (0..layer.mu_b.len()).map(|_| rng.normal()).collect();
                                let eps = tape.constant(
                                    Tensor::from_vec(layer.mu_b.shape().to_vec(), eps)
                                        .expect("shape preserved"),
                                );
                                let noise = tape.mul(node.sigma_b, eps)?;
                                tape.add(node.mu_b, noise)?
                            }
                        };
                        let z = tape.matmul(h, w)?;
                        let bb = tape.broadcast_rows(b, rows)?;
                        let mut z = tape.add(z, bb)?;
                        if let Some(act) = layer.activation {
                            z = match act {
                                Activation::Relu => tape.relu(z)?,
                                Activation::Tanh => tape.tanh(z)?,
                            };
                        }
                        h = z;
                    }
                    let term = data_loss.build_on_tape(&mut tape, h, &yb)?;
                    data_term = Some(match data_term {
                        Some(acc) => tape.add(acc, term)?,
                        None => term,
                    });
                }
                let mut loss = tape.scale(
                    data_term.expect("at least one sample"),
                    1.0 / vi_config.mc_train_samples as f64,
                )?;

                // KL to the prior over all stochastic layers.
                if kl_scale > 0.0 {
                    let mut kl_total: Option<VarId> = None;
                    for (layer, node) in model.layers.iter().zip(&nodes) {
                        if layer.frozen {
                            continue;
                        }
                        let kw =
                            kl_gaussian_on_tape(&mut tape, node.mu_w, node.sigma_w, model.prior_std)?;
                        let kb =
                            kl_gaussian_on_tape(&mut tape, node.mu_b, node.sigma_b, model.prior_std)?;
                        let pair = tape.add(kw, kb)?;
                        kl_total = Some(match kl_total {
                            Some(acc) => tape.add(acc, pair)?,
                            None => pair,
                        });
                    }
                    let kl = tape.scale(kl_total.expect("stochastic layer exists"), kl_scale)?;
                    loss = tape.add(loss, kl)?;
                }

                let loss_val = tape.value(loss).scalar_value()?;
                let mut grads = tape.backward(loss)?;
                if let Some(max_norm) = train_config.grad_clip {
                    let norm = grads.global_norm();
                    if norm > max_norm {
                        grads.scale_all(max_norm / norm);
                    }
                }

                // Apply updates back into the variational parameters.
                let mut tensors: Vec<Tensor> = Vec::with_capacity(slot_sizes.len());
                for layer in model.layers.iter().filter(|l| !l.frozen) {
                    tensors.extend([
                        layer.mu_w.clone(),
                        layer.rho_w.clone(),
                        layer.mu_b.clone(),
                        layer.rho_b.clone(),
                    ]);
                }
                {
                    let mut refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
                    opt.apply(&mut refs, &grads, &skip);
                }
                let mut it = tensors.into_iter();
                for layer in model.layers.iter_mut().filter(|l| !l.frozen) {
                    layer.mu_w = it.next().expect("slot layout");
                    layer.rho_w = it.next().expect("slot layout");
                    layer.mu_b = it.next().expect("slot layout");
                    layer.rho_b = it.next().expect("slot layout");
                }
                Ok(loss_val)
            })();

            let loss_val =
                step.map_err(|e| crate::train::promote_non_finite(e, epoch, bi))?;
            epoch_loss += loss_val * batch.len() as f64;
        }
        trace.push(epoch_loss / n as f64);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_heteroscedastic_sine, SineNoise};
    use crate::regression::{fit_mve, mixture_moments};

    fn sine_xy(n: usize, seed: u64) -> (Tensor, Vec<f64>) {
        let ds = gen_heteroscedastic_sine(n, seed, SineNoise::default()).unwrap();
        let y = ds.y.as_regression().unwrap().to_vec();
        (ds.x, y)
    }

    fn model_cfg(seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: 1,
            hidden: vec![24],
            output_dim: 2,
            activation: Activation::Tanh,
            dropout: vec![0.0],
            init_seed: seed,
        }
    }

    fn train_cfg(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            learning_rate: 5e-3,
            seed,
            ..TrainConfig::default()
        }
    }

    // Reparameterization sanity: dE[w]/dmu = 1 for fixed eps.
    #[test]
    fn reparameterization_gradient_wrt_mu_is_one() {
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::scalar(0.3));
        let rho = tape.param(Tensor::scalar(-1.0));
        let sigma = tape.softplus(rho).unwrap();
        let eps = tape.constant(Tensor::scalar(0.71));
        let noise = tape.mul(sigma, eps).unwrap();
        let w = tape.add(mu, noise).unwrap();
        let grads = tape.backward(w).unwrap();
        assert!((grads.slot(0).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elbo_trace_reproducible() {
        let (x, y) = sine_xy(300, 30);
        let run = || {
            fit_bnn_vi_elbo(&x, &y, &model_cfg(31), &train_cfg(32, 15), &ViConfig::default())
                .unwrap()
                .elbo_trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        let (x, y) = sine_xy(100, 33);
        let bad_prior = ViConfig { prior_std: 0.0, ..ViConfig::default() };
        assert!(fit_bnn_vi_elbo(&x, &y, &model_cfg(1), &train_cfg(2, 5), &bad_prior).is_err());
        let bad_beta = ViConfig { kl_weight: -0.5, ..ViConfig::default() };
        assert!(fit_bnn_vi_elbo(&x, &y, &model_cfg(1), &train_cfg(2, 5), &bad_beta).is_err());
        let bad_flags = ViConfig {
            frozen_layers: Some(vec![true]),
            ..ViConfig::default()
        };
        assert!(fit_bnn_vi_elbo(&x, &y, &model_cfg(1), &train_cfg(2, 5), &bad_flags).is_err());
    }

    // With beta = 0 and tiny initial sigma the posterior means train like
    // a plain MVE network; test RMSE within 20% on the toy sinusoid.
    #[test]
    fn beta_zero_degenerates_to_mve() {
        let (x, y) = sine_xy(1200, 34);
        let (tx, ty) = sine_xy(400, 35);
        let vi_cfg = ViConfig {
            kl_weight: 0.0,
            init_sigma: 0.01,
            ..ViConfig::default()
        };
        let vi = fit_bnn_vi_elbo(&x, &y, &model_cfg(36), &train_cfg(37, 200), &vi_cfg).unwrap();
        let mix = vi.predictor.predict(&tx, 50, 38).unwrap();
        let g = mixture_moments(&mix).unwrap();
        let vi_rmse = rmse(&g.mean, &ty);

        let (mve, _) = fit_mve(&x, &y, &model_cfg(36), &train_cfg(37, 200)).unwrap();
        let mve_rmse = rmse(&mve.predict(&tx).unwrap().mean, &ty);
        assert!(
            (vi_rmse - mve_rmse).abs() <= 0.2 * mve_rmse,
            "vi rmse {vi_rmse} vs mve rmse {mve_rmse}"
        );
    }

    fn rmse(pred: &[f64], y: &[f64]) -> f64 {
        let n = pred.len() as f64;
        (pred
            .iter()
            .zip(y)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n)
            .sqrt()
    }

    #[test]
    fn frozen_layers_stay_deterministic() {
        let (x, y) = sine_xy(200, 39);
        let vi_cfg = ViConfig {
            frozen_layers: Some(vec![true, false]),
            ..ViConfig::default()
        };
        let fit = fit_bnn_vi_elbo(&x, &y, &model_cfg(40), &train_cfg(41, 10), &vi_cfg).unwrap();
        let model = &fit.predictor.model;
        assert!(model.layers[0].frozen);
        // Frozen layer kept its init means (never updated).
        let seed_model = MlpModel::build(&model_cfg(40)).unwrap();
        assert_eq!(
            model.layers[0].mu_w.data(),
            seed_model.layers()[0].weights.data()
        );
        // Stochastic layer moved.
        assert_ne!(
            model.layers[1].mu_w.data(),
            seed_model.layers()[1].weights.data()
        );
    }

    #[test]
    fn prediction_needs_two_samples_and_is_stochastic() {
        let (x, y) = sine_xy(150, 42);
        let fit =
            fit_bnn_vi_elbo(&x, &y, &model_cfg(43), &train_cfg(44, 10), &ViConfig::default())
                .unwrap();
        assert!(fit.predictor.predict(&x, 1, 0).is_err());
        let mix = fit.predictor.predict(&x, 8, 45).unwrap();
        assert_eq!(mix.members(), 8);
        let (_, epistemic) = crate::regression::mixture_decompose(&mix).unwrap();
        assert!(epistemic.iter().any(|e| *e > 0.0));
    }
}
