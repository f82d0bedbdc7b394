//! Seeded mini-batch training shared by every method.
//!
//! One `fit` call is a deterministic function of (model, data, loss,
//! config): shuffling, dropout masks, and anything else stochastic derive
//! from the config seed. Gradients are clipped at a global norm by
//! default as insurance against early NLL blow-ups; the epoch-end
//! callback receives a read-only parameter snapshot, which is all SWAG
//! needs to hook in.

use crate::data::Targets;
use crate::losses::{Loss, LossError};
use crate::nn::{DropoutMode, MlpModel, NnError};
use crate::rng::{child_seed, child_seed_indexed, Rng};
use crate::tape::{Gradients, Tape};
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Heavy-ball momentum 0.9.
    SgdMomentum,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub shuffle: bool,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            shuffle: true,
            grad_clip: Some(10.0),
        }
    }
}

const MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second-moment state for one flat parameter slot list.
pub struct OptimState {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, slot_sizes: &[usize]) -> Self {
        let m = slot_sizes.iter().map(|s| vec![0.0; *s]).collect();
        let v = match kind {
            OptimizerKind::Adam => slot_sizes.iter().map(|s| vec![0.0; *s]).collect(),
            _ => Vec::new(),
        };
        OptimState {
            kind,
            learning_rate,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update. `skip[i]` freezes slot `i`; its state also stays
    /// untouched so a later unfreeze starts cold.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &Gradients, skip: &[bool]) {
        self.step += 1;
        for (i, p) in params.iter_mut().enumerate() {
            if skip[i] {
                continue;
            }
            let g = grads.slot(i).data();
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in data.iter_mut().zip(g) {
                        *w -= self.learning_rate * gv;
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let m = &mut self.m[i];
                    for ((w, gv), mv) in data.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mv = MOMENTUM * *mv + gv;
                        *w -= self.learning_rate * *mv;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for (((w, gv), mv), vv) in
                        data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *w -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Seeded mini-batch index stream: fresh shuffle per epoch, contiguous
/// chunks of `batch_size`.
pub struct Batcher {
    n: usize,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Self {
        Batcher {
            n,
            batch_size,
            shuffle,
            seed,
        }
    }

    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.n).collect();
        if self.shuffle {
            let mut rng = Rng::new(child_seed_indexed(self.seed, "shuffle", epoch));
            rng.shuffle(&mut order);
        }
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Gather rows of `x` and the matching targets for one batch.
pub fn gather_batch(x: &Tensor, y: &Targets, idx: &[usize]) -> (Tensor, Targets) {
    let d = x.cols().expect("batch source is a matrix");
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    let xb = Tensor::from_vec(vec![idx.len(), d], data).expect("gather preserves shape");
    let yb = match y {
        Targets::Regression(v) => Targets::Regression(idx.iter().map(|&i| v[i]).collect()),
        Targets::Classification { labels, n_classes } => Targets::Classification {
            labels: idx.iter().map(|&i| labels[i]).collect(),
            n_classes: *n_classes,
        },
    };
    (xb, yb)
}

/// Per-epoch view handed to callbacks after the epoch's updates.
pub struct EpochSnapshot<'a> {
    pub epoch: usize,
    pub mean_loss: f64,
    pub model: &'a MlpModel,
}

#[derive(Debug, Clone)]
pub struct FitTrace {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Train `model` in place and return the loss trace.
pub fn fit(
    model: &mut MlpModel,
    x: &Tensor,
    y: &Targets,
    loss: &Loss,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSnapshot),
) -> Result<FitTrace, TrainError> {
    let n = y.len();
    if n == 0 {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if config.batch_size == 0 || config.batch_size > n {
        return Err(TrainError::Config(format!(
            "batch size {} must lie in [1, {n}]",
            config.batch_size
        )));
    }
    if config.learning_rate < 0.0 {
        return Err(TrainError::Config("learning rate must be non-negative".into()));
    }
    loss.validate()?;
    let n_classes = y.as_classification().map(|(_, c)| c);
    let need = loss.required_output_dim(n_classes);
    if model.output_dim() != need {
        return Err(TrainError::Config(format!(
            "{} loss needs {need} output columns, model has {}",
            loss.name(),
            model.output_dim()
        )));
    }

    let slot_sizes: Vec<usize> = model
        .layers()
        .iter()
        .flat_map(|l| [l.weights.len(), l.bias.len()])
        .collect();
    let mut opt = OptimState::new(config.optimizer, config.learning_rate, &slot_sizes);
    let skip: Vec<bool> = model
        .frozen_flags()
        .iter()
        .flat_map(|f| [*f, *f])
        .collect();
    let batcher = Batcher::new(n, config.batch_size, config.shuffle, config.seed);
    let dropout_seed = child_seed(config.seed, "dropout");

    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for (bi, batch) in batcher.epoch_batches(epoch).into_iter().enumerate() {
            let (xb, yb) = gather_batch(x, y, &batch);
            let mode = if model.has_dropout() {
                DropoutMode::Sampled {
                    seed: child_seed_indexed(
                        child_seed_indexed(dropout_seed, "epoch", epoch),
                        "batch",
                        bi,
                    ),
                }
            } else {
                DropoutMode::Off
            };

            let step = (|| -> Result<f64, TrainError> {
                let mut tape = Tape::new();
                let taped = model.forward_on_tape(&mut tape, &xb, mode)?;
                let loss_id = loss.build_on_tape(&mut tape, taped.output, &yb)?;
                let loss_val = tape.value(loss_id).scalar_value()?;
                let mut grads = tape.backward(loss_id)?;
                if let Some(max_norm) = config.grad_clip {
                    let norm = grads.global_norm();
                    if norm > max_norm {
                        grads.scale_all(max_norm / norm);
                    }
                }
                // Write updates straight back into the model's layers.
                let mut new_params: Vec<Tensor> =
                    Vec::with_capacity(taped.layer_slots.len() * 2);
                for layer in model.layers() {
                    new_params.push(layer.weights.clone());
                    new_params.push(layer.bias.clone());
                }
                {
                    let mut refs: Vec<&mut Tensor> = new_params.iter_mut().collect();
                    opt.apply(&mut refs, &grads, &skip);
                }
                for (li, pair) in new_params.chunks_exact(2).enumerate() {
                    model.set_layer_params(li, pair[0].clone(), pair[1].clone());
                }
                Ok(loss_val)
            })();

            let loss_val = step.map_err(|e| promote_non_finite(e, epoch, bi))?;
            epoch_loss += loss_val * batch.len() as f64;
        }
        let mean_loss = epoch_loss / n as f64;
        trace.push(mean_loss);
        on_epoch(&EpochSnapshot {
            epoch,
            mean_loss,
            model,
        });
    }
    Ok(FitTrace { epoch_loss: trace })
}

/// Attach (epoch, batch) context to non-finite failures so aborted runs
/// say where training diverged.
pub(crate) fn promote_non_finite(e: TrainError, epoch: usize, batch: usize) -> TrainError {
    let non_finite = matches!(
        &e,
        TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
    );
    if non_finite {
        TrainError::NonFiniteLoss { epoch, batch }
    } else {
        e
    }
}
