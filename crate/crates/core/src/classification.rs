//! Classification UQ: softmax baseline, deep ensembles, MC dropout,
//! variational inference, test-time augmentation, and temperature scaling,
//! with entropy-based uncertainty and its mutual-information split.

use crate::data::Targets;
use crate::losses::Loss;
use crate::nn::{DropoutMode, MlpConfig, MlpModel, NnError};
use crate::regression::{ViConfig, ViModel};
use crate::rng::{child_seed_indexed, Rng};
use crate::tensor::{Tensor, TensorError};
use crate::train::{fit, FitTrace, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassificationError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-sample class probabilities; each row is a simplex point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPrediction {
    pub probs: Vec<Vec<f64>>,
}

impl CategoricalPrediction {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                    .map(|(i, _)| i)
                    .expect("non-empty row")
            })
            .collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let correct = self
            .argmax()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        correct as f64 / labels.len() as f64
    }
}

/// Member-wise probabilities of an ensemble-style predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEnsemble {
    pub members: Vec<CategoricalPrediction>,
}

impl CategoricalEnsemble {
    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    /// Uniform average of member probabilities: the predictive
    /// distribution.
    pub fn mean_prediction(&self) -> CategoricalPrediction {
        let m = self.members.len();
        let n = self.members[0].len();
        let c = self.members[0].n_classes();
        let mut probs = vec![vec![0.0; c]; n];
        for member in &self.members {
            for (acc, row) in probs.iter_mut().zip(&member.probs) {
                for (a, p) in acc.iter_mut().zip(row) {
                    *a += p;
                }
            }
        }
        for row in &mut probs {
            for p in row {
                *p /= m as f64;
            }
        }
        CategoricalPrediction { probs }
    }
}

/// Numerically stable row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Tensor) -> CategoricalPrediction {
    let n = logits.rows().expect("logits form a matrix");
    let mut probs = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for e in &mut exps {
            *e /= sum;
        }
        probs.push(exps);
    }
    CategoricalPrediction { probs }
}

/// Vanilla softmax probabilities of a deterministic classifier.
pub fn softmax_predict(
    model: &MlpModel,
    x: &Tensor,
) -> Result<CategoricalPrediction, ClassificationError> {
    let fwd = model.forward(x, DropoutMode::Off)?;
    Ok(softmax_rows(&fwd.output))
}

/// Mean cross-entropy of logits against labels, in log-sum-exp form.
pub fn cross_entropy_eval(logits: &Tensor, labels: &[usize]) -> Result<f64, ClassificationError> {
    let n = logits.rows()?;
    let c = logits.cols()?;
    if labels.len() != n {
        return Err(ClassificationError::Invalid(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(ClassificationError::Invalid(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / n as f64)
}

/// Shannon entropy per sample in nats, with `0 ln 0 = 0`.
pub fn entropy(pred: &CategoricalPrediction) -> Vec<f64> {
    pred.probs
        .iter()
        .map(|row| {
            -row.iter()
                .map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 })
                .sum::<f64>()
        })
        .collect()
}

/// Entropy split of an ensemble: `total = aleatoric + epistemic` holds
/// exactly because total is constructed as that sum; aleatoric is the
/// mean member entropy and epistemic the mutual information
/// `H(mean) - mean(H)` (non-negative by Jensen up to round-off).
#[derive(Debug, Clone)]
pub struct EntropyDecomposition {
    pub total: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

pub fn ensemble_decompose(
    ens: &CategoricalEnsemble,
) -> Result<EntropyDecomposition, ClassificationError> {
    let m = ens.n_members();
    if m < 2 {
        return Err(ClassificationError::Invalid(format!(
            "entropy decomposition needs at least 2 members, got {m}"
        )));
    }
    let mean = ens.mean_prediction();
    let mean_entropy = entropy(&mean);
    let n = mean.len();
    let mut aleatoric = vec![0.0; n];
    for member in &ens.members {
        for (a, h) in aleatoric.iter_mut().zip(entropy(member)) {
            *a += h;
        }
    }
    for a in &mut aleatoric {
        *a /= m as f64;
    }
    let epistemic: Vec<f64> = mean_entropy
        .iter()
        .zip(&aleatoric)
        .map(|(t, a)| t - a)
        .collect();
    let total = aleatoric
        .iter()
        .zip(&epistemic)
        .map(|(a, e)| a + e)
        .collect();
    Ok(EntropyDecomposition {
        total,
        aleatoric,
        epistemic,
    })
}

/// Input perturbations for test-time augmentation on tabular data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Augmentation {
    Identity,
    /// Additive Gaussian noise on every feature.
    GaussianJitter { std: f64 },
    /// Negate the designated (symmetric) feature columns.
    SignFlip { features: Vec<usize> },
}

impl Augmentation {
    fn apply(&self, x: &Tensor, rng: &mut Rng) -> Result<Tensor, TensorError> {
        match self {
            Augmentation::Identity => Ok(x.clone()),
            Augmentation::GaussianJitter { std } => {
                x.map("jitter", |v| v + std * rng.normal())
            }
            Augmentation::SignFlip { features } => {
                let (n, d) = (x.rows()?, x.cols()?);
                let mut data = x.data().to_vec();
                for i in 0..n {
                    for &j in features {
                        if j < d {
                            data[i * d + j] = -data[i * d + j];
                        }
                    }
                }
                Tensor::from_vec(vec![n, d], data)
            }
        }
    }
}

/// One ensemble member per augmentation, in order.
pub fn predict_tta(
    model: &MlpModel,
    x: &Tensor,
    augmentations: &[Augmentation],
    seed: u64,
) -> Result<CategoricalEnsemble, ClassificationError> {
    if augmentations.len() < 2 {
        return Err(ClassificationError::Invalid(format!(
            "tta needs at least 2 augmentations, got {}",
            augmentations.len()
        )));
    }
    let mut members = Vec::with_capacity(augmentations.len());
    for (i, aug) in augmentations.iter().enumerate() {
        let mut rng = Rng::new(child_seed_indexed(seed, "tta", i));
        let xa = aug.apply(x, &mut rng)?;
        members.push(softmax_predict(model, &xa)?);
    }
    Ok(CategoricalEnsemble { members })
}

/// Post-hoc temperature for logit scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub t: f64,
}

impl Temperature {
    /// `logits / t`.
    pub fn scale_logits(&self, logits: &Tensor) -> Tensor {
        logits
            .map("temperature", |v| v / self.t)
            .expect("finite logits stay finite under positive temperature")
    }
}

const TEMP_LOG_LO: f64 = -2.995_732_273_553_991; // ln 0.05
const TEMP_LOG_HI: f64 = 2.995_732_273_553_991; // ln 20
const TEMP_TOL: f64 = 1e-4;

/// Fit a temperature by minimizing validation NLL of `softmax(logits/T)`
/// via golden-section search on `ln T` over `[ln 0.05, ln 20]`, tolerance
/// 1e-4. Ties break toward `T = 1`.
pub fn fit_temperature(
    logits_val: &Tensor,
    labels_val: &[usize],
) -> Result<Temperature, ClassificationError> {
    if labels_val.is_empty() {
        return Err(ClassificationError::Invalid("empty validation set".into()));
    }
    let first = labels_val[0];
    if labels_val.iter().all(|l| *l == first) {
        return Err(ClassificationError::Invalid(
            "single-class validation labels cannot identify a temperature".into(),
        ));
    }
    let nll_at = |log_t: f64| -> Result<f64, ClassificationError> {
        let t = log_t.exp();
        let scaled = Temperature { t }.scale_logits(logits_val);
        cross_entropy_eval(&scaled, labels_val)
    };

    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMP_LOG_LO, TEMP_LOG_HI);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = nll_at(c)?;
    let mut fd = nll_at(d)?;
    while (b - a).abs() > TEMP_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = nll_at(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = nll_at(d)?;
        }
    }
    let best_log_t = 0.5 * (a + b);
    let best = nll_at(best_log_t)?;
    let at_one = nll_at(0.0)?;
    if best >= at_one - 1e-12 {
        return Ok(Temperature { t: 1.0 });
    }
    Ok(Temperature { t: best_log_t.exp() })
}

/// Deterministic softmax classifier.
#[derive(Debug, Clone)]
pub struct ClassifierPredictor {
    pub model: MlpModel,
}

impl ClassifierPredictor {
    pub fn predict(&self, x: &Tensor) -> Result<CategoricalPrediction, ClassificationError> {
        softmax_predict(&self.model, x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ClassificationError> {
        Ok(self.model.forward(x, DropoutMode::Off)?.output)
    }
}

pub fn fit_classifier_deterministic(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    model_config: &MlpConfig,
    train_config: &TrainConfig,
) -> Result<(ClassifierPredictor, FitTrace), ClassificationError> {
    if model_config.output_dim != n_classes {
        return Err(ClassificationError::Invalid(format!(
            "classifier needs output_dim {n_classes}, got {}",
            model_config.output_dim
        )));
    }
    let mut model = MlpModel::build(model_config)?;
    let targets = Targets::Classification {
        labels: labels.to_vec(),
        n_classes,
    };
    let trace = fit(&mut model, x, &targets, &Loss::CrossEntropy, train_config, |_| {})?;
    Ok((ClassifierPredictor { model }, trace))
}

/// Deep ensemble of softmax classifiers.
#[derive(Debug, Clone)]
pub struct ClassifierEnsemble {
    pub members: Vec<ClassifierPredictor>,
}

impl ClassifierEnsemble {
    pub fn predict(&self, x: &Tensor) -> Result<CategoricalEnsemble, ClassificationError> {
        let members = self
            .members
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CategoricalEnsemble { members })
    }
}

pub fn fit_classifier_ensemble(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    model_config: &MlpConfig,
    train_config: &TrainConfig,
    m: usize,
    base_seed: u64,
) -> Result<(ClassifierEnsemble, Vec<FitTrace>), ClassificationError> {
    if m < 2 {
        return Err(ClassificationError::Invalid(format!(
            "ensemble needs at least 2 members, got {m}"
        )));
    }
    let mut members = Vec::with_capacity(m);
    let mut traces = Vec::with_capacity(m);
    for i in 0..m {
        let mut cfg = model_config.clone();
        cfg.init_seed = child_seed_indexed(base_seed, "member-init", i);
        let mut tcfg = train_config.clone();
        tcfg.seed = child_seed_indexed(base_seed, "member-train", i);
        let (member, trace) = fit_classifier_deterministic(x, labels, n_classes, &cfg, &tcfg)?;
        members.push(member);
        traces.push(trace);
    }
    Ok((ClassifierEnsemble { members }, traces))
}

/// `t` stochastic softmax passes with dropout left on.
pub fn predict_classifier_mc_dropout(
    model: &MlpModel,
    x: &Tensor,
    t: usize,
    seed: u64,
) -> Result<CategoricalEnsemble, ClassificationError> {
    if t < 2 {
        return Err(ClassificationError::Invalid(format!(
            "mc dropout needs at least 2 passes, got {t}"
        )));
    }
    let mut members = Vec::with_capacity(t);
    for pass in 0..t {
        let mode = DropoutMode::Sampled {
            seed: child_seed_indexed(seed, "mc-pass", pass),
        };
        let fwd = model.forward(x, mode)?;
        members.push(softmax_rows(&fwd.output));
    }
    Ok(CategoricalEnsemble { members })
}

/// Variational softmax classifier.
#[derive(Debug, Clone)]
pub struct ViClassifier {
    pub model: ViModel,
}

impl ViClassifier {
    pub fn predict(
        &self,
        x: &Tensor,
        t: usize,
        seed: u64,
    ) -> Result<CategoricalEnsemble, ClassificationError> {
        if t < 2 {
            return Err(ClassificationError::Invalid(format!(
                "vi prediction needs at least 2 samples, got {t}"
            )));
        }
        let mut members = Vec::with_capacity(t);
        for pass in 0..t {
            let out = self
                .model
                .forward_sample(x, child_seed_indexed(seed, "vi-pass", pass))
                .map_err(|e| ClassificationError::Invalid(e.to_string()))?;
            members.push(softmax_rows(&out));
        }
        Ok(CategoricalEnsemble { members })
    }
}

pub fn fit_classifier_vi(
    x: &Tensor,
    labels: &[usize],
    n_classes: usize,
    model_config: &MlpConfig,
    train_config: &TrainConfig,
    vi_config: &ViConfig,
) -> Result<(ViClassifier, Vec<f64>), ClassificationError> {
    if model_config.output_dim != n_classes {
        return Err(ClassificationError::Invalid(format!(
            "classifier needs output_dim {n_classes}, got {}",
            model_config.output_dim
        )));
    }
    let targets = Targets::Classification {
        labels: labels.to_vec(),
        n_classes,
    };
    let (model, trace) = crate::regression::fit_vi_with_loss(
        x,
        &targets,
        &Loss::CrossEntropy,
        model_config,
        train_config,
        vi_config,
    )
    .map_err(|e| ClassificationError::Invalid(e.to_string()))?;
    Ok((ViClassifier { model }, trace))
}
