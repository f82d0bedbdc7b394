//! Experiment configuration: a versioned TOML document describing one
//! dataset → method → metrics pipeline.
//!
//! Derived seeds (dataset, split) default to children of the top-level
//! run seed and are materialized at load time, so the persisted config
//! snapshot pins every stochastic choice explicitly.

use super::HarnessError;
use crate::data::SplitSpec;
use crate::nn::Activation;
use crate::rng::child_seed;
use crate::train::OptimizerKind;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

pub const REGRESSION_METHODS: &[&str] = &[
    "deterministic",
    "mve",
    "der",
    "qr",
    "cqr",
    "deep_ensemble",
    "mc_dropout",
    "swag",
    "laplace",
    "bnn_vi_elbo",
];

pub const CLASSIFICATION_METHODS: &[&str] = &[
    "deterministic",
    "deep_ensemble",
    "mc_dropout",
    "bnn_vi_elbo",
    "tta",
    "temp_scaling",
    "raps",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Regression => write!(f, "regression"),
            TaskKind::Classification => write!(f, "classification"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// `heteroscedastic_sine`, `two_moons`, or `csv`.
    pub kind: String,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Generator seed; derived from the run seed when omitted.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_noise_a")]
    pub noise_a: f64,
    #[serde(default = "default_noise_b")]
    pub noise_b: f64,
    #[serde(default = "default_moons_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub target_column: Option<String>,
    #[serde(default)]
    pub group_column: Option<String>,
}

fn default_n() -> usize {
    2000
}
fn default_noise_a() -> f64 {
    0.1
}
fn default_noise_b() -> f64 {
    0.2
}
fn default_moons_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub calib: f64,
    pub test: f64,
    /// Shuffle seed; derived from the run seed when omitted.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SplitConfig {
    pub fn to_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.train,
            val: self.val,
            calib: self.calib,
            test: self.test,
            seed: self.seed.expect("resolved at load time"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// One rate per hidden layer; zeros when omitted.
    #[serde(default)]
    pub dropout: Vec<f64>,
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Global-norm gradient clip; negative disables.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_true() -> bool {
    true
}
fn default_clip() -> f64 {
    10.0
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            optimizer: default_optimizer(),
            shuffle: default_true(),
            grad_clip: default_clip(),
        }
    }
}

/// Method selector plus the union of per-method knobs; validation per
/// method happens in [`ExperimentConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: String,
    /// Ensemble members.
    #[serde(default = "default_members")]
    pub members: usize,
    /// Stochastic forward passes (MC dropout, VI prediction).
    #[serde(default = "default_passes")]
    pub passes: usize,
    /// Evidential regularizer weight.
    #[serde(default = "default_der_lambda")]
    pub lambda: f64,
    /// Quantile levels; defaults to `[alpha/2, 0.5, 1 - alpha/2]`.
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    #[serde(default = "default_swag_epochs")]
    pub swag_epochs: usize,
    #[serde(default = "default_swag_k")]
    pub swag_k: usize,
    /// SWAG exploration learning rate; defaults to the training rate.
    #[serde(default)]
    pub swag_lr: Option<f64>,
    #[serde(default = "default_swag_samples")]
    pub swag_samples: usize,
    #[serde(default = "default_swag_scale")]
    pub swag_scale: f64,
    #[serde(default = "default_prior_std")]
    pub prior_std: f64,
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
    #[serde(default = "default_mc_train_samples")]
    pub mc_train_samples: usize,
    #[serde(default = "default_init_sigma")]
    pub init_sigma: f64,
    #[serde(default = "default_prior_precision")]
    pub prior_precision: f64,
    /// Laplace noise mode: `estimate`, `mve_head`, or `fixed`.
    #[serde(default = "default_noise_mode")]
    pub noise_mode: String,
    #[serde(default)]
    pub noise_var: Option<f64>,
    /// RAPS rank threshold and penalty.
    #[serde(default = "default_k_reg")]
    pub k_reg: usize,
    #[serde(default = "default_raps_lambda")]
    pub raps_lambda: f64,
    #[serde(default)]
    pub randomized: bool,
    /// Gaussian jitter std for TTA members.
    #[serde(default = "default_tta_std")]
    pub tta_std: f64,
    /// TTA member count (identity plus jittered copies).
    #[serde(default = "default_tta_members")]
    pub tta_members: usize,
}

fn default_members() -> usize {
    5
}
fn default_passes() -> usize {
    50
}
fn default_der_lambda() -> f64 {
    0.01
}
fn default_swag_epochs() -> usize {
    20
}
fn default_swag_k() -> usize {
    10
}
fn default_swag_samples() -> usize {
    30
}
fn default_swag_scale() -> f64 {
    1.0
}
fn default_prior_std() -> f64 {
    1.0
}
fn default_kl_weight() -> f64 {
    1.0
}
fn default_mc_train_samples() -> usize {
    1
}
fn default_init_sigma() -> f64 {
    0.05
}
fn default_prior_precision() -> f64 {
    1.0
}
fn default_noise_mode() -> String {
    "estimate".to_string()
}
fn default_k_reg() -> usize {
    1
}
fn default_raps_lambda() -> f64 {
    0.01
}
fn default_tta_std() -> f64 {
    0.1
}
fn default_tta_members() -> usize {
    5
}

impl MethodConfig {
    pub fn named(name: &str) -> Self {
        toml::from_str(&format!("name = {name:?}")).expect("minimal method section parses")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_selective_quantile")]
    pub selective_quantile: f64,
    /// Calibration levels for MACE; 0.05..0.95 when omitted.
    #[serde(default)]
    pub mace_levels: Option<Vec<f64>>,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_selective_quantile() -> f64 {
    0.8
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: default_alpha(),
            selective_quantile: default_selective_quantile(),
            mace_levels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub task: TaskKind,
    pub seed: u64,
    /// Run artifact directory.
    pub output: String,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub method: MethodConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

impl ExperimentConfig {
    /// Parse a TOML document, apply an optional seed override, derive any
    /// omitted seeds, and validate.
    pub fn from_toml(text: &str, seed_override: Option<u64>) -> Result<Self, HarnessError> {
        let mut config: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if let Some(seed) = seed_override {
            config.seed = seed;
            // Derived seeds must follow the override.
            config.dataset.seed = None;
            config.split.seed = None;
        }
        config.resolve_seeds();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text, seed_override)
    }

    fn resolve_seeds(&mut self) {
        if self.dataset.seed.is_none() {
            self.dataset.seed = Some(child_seed(self.seed, "dataset"));
        }
        if self.split.seed.is_none() {
            self.split.seed = Some(child_seed(self.seed, "split"));
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let methods = match self.task {
            TaskKind::Regression => REGRESSION_METHODS,
            TaskKind::Classification => CLASSIFICATION_METHODS,
        };
        if !methods.contains(&self.method.name.as_str()) {
            return Err(HarnessError::Config(format!(
                "method {:?} is not available for {} (choose one of {:?})",
                self.method.name, self.task, methods
            )));
        }
        match (self.dataset.kind.as_str(), self.task) {
            ("heteroscedastic_sine", TaskKind::Regression) => {}
            ("two_moons", TaskKind::Classification) => {}
            ("csv", _) => {
                if self.dataset.path.is_none() || self.dataset.target_column.is_none() {
                    return Err(HarnessError::Config(
                        "csv datasets need `path` and `target_column`".into(),
                    ));
                }
            }
            (kind, task) => {
                return Err(HarnessError::Config(format!(
                    "dataset kind {kind:?} does not serve {task} tasks"
                )));
            }
        }
        let spec = self.split.to_spec();
        spec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.needs_calibration() && self.split.calib <= 0.0 {
            return Err(HarnessError::Config(format!(
                "method {:?} is conformal and needs a calibration fraction > 0",
                self.method.name
            )));
        }
        if !self.model.dropout.is_empty() && self.model.dropout.len() != self.model.hidden.len() {
            return Err(HarnessError::Config(format!(
                "{} dropout rates for {} hidden layers",
                self.model.dropout.len(),
                self.model.hidden.len()
            )));
        }
        if !(0.0 < self.eval.alpha && self.eval.alpha < 1.0) {
            return Err(HarnessError::Config(format!(
                "eval alpha {} must lie in (0, 1)",
                self.eval.alpha
            )));
        }
        if !(0.0 < self.eval.selective_quantile && self.eval.selective_quantile < 1.0) {
            return Err(HarnessError::Config(format!(
                "selective quantile {} must lie in (0, 1)",
                self.eval.selective_quantile
            )));
        }
        if let Some(levels) = &self.method.levels {
            if levels.len() < 2 {
                return Err(HarnessError::Config(
                    "quantile methods need at least two levels".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self.method.name.as_str(), "cqr" | "raps")
    }

    /// Seed stream root for this run's method (decoupled from other
    /// methods sharing the config seed, which is what makes benchmark
    /// rows independent of scheduling).
    pub fn method_seed(&self) -> u64 {
        child_seed(self.seed, &format!("method.{}", self.method.name))
    }

    /// Per-layer dropout rates, zero-filled when the section was omitted.
    pub fn dropout_rates(&self) -> Vec<f64> {
        if self.model.dropout.is_empty() {
            vec![0.0; self.model.hidden.len()]
        } else {
            self.model.dropout.clone()
        }
    }

    pub fn grad_clip(&self) -> Option<f64> {
        if self.train.grad_clip < 0.0 {
            None
        } else {
            Some(self.train.grad_clip)
        }
    }

    pub fn mace_levels(&self) -> Vec<f64> {
        self.eval
            .mace_levels
            .clone()
            .unwrap_or_else(crate::metrics::default_mace_levels)
    }

    /// Quantile levels for QR/CQR: configured, or
    /// `[alpha/2, 0.5, 1 - alpha/2]`.
    pub fn quantile_levels(&self) -> Vec<f64> {
        self.method.levels.clone().unwrap_or_else(|| {
            vec![self.eval.alpha / 2.0, 0.5, 1.0 - self.eval.alpha / 2.0]
        })
    }

    /// Snapshot serialized back to TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
task = "regression"
seed = 42
output = "runs/demo"

[dataset]
kind = "heteroscedastic_sine"
n = 200

[split]
train = 0.6
val = 0.15
calib = 0.1
test = 0.15

[model]
hidden = [16, 16]

[method]
name = "mve"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let config = ExperimentConfig::from_toml(MINIMAL, None).unwrap();
        assert_eq!(config.version, CONFIG_VERSION);
        assert_eq!(config.train.epochs, 200);
        assert_eq!(config.eval.alpha, 0.1);
        assert_eq!(config.method.members, 5);
        assert!(config.dataset.seed.is_some());
        assert!(config.split.seed.is_some());
        // Snapshot round-trips.
        let snap = config.to_toml();
        let back = ExperimentConfig::from_toml(&snap, None).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn seed_override_rederives_children() {
        let a = ExperimentConfig::from_toml(MINIMAL, None).unwrap();
        let b = ExperimentConfig::from_toml(MINIMAL, Some(7)).unwrap();
        assert_eq!(b.seed, 7);
        assert_ne!(a.dataset.seed, b.dataset.seed);
        let c = ExperimentConfig::from_toml(MINIMAL, Some(7)).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        // Wrong method for the task.
        let bad = MINIMAL.replace("name = \"mve\"", "name = \"raps\"");
        assert!(ExperimentConfig::from_toml(&bad, None).is_err());

        // Conformal method without calibration data.
        let bad = MINIMAL
            .replace("name = \"mve\"", "name = \"cqr\"")
            .replace("calib = 0.1", "calib = 0.0")
            .replace("val = 0.15", "val = 0.25");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad, None),
            Err(HarnessError::Config(msg)) if msg.contains("calibration")
        ));

        // Dataset/task mismatch.
        let bad = MINIMAL.replace("heteroscedastic_sine", "two_moons");
        assert!(ExperimentConfig::from_toml(&bad, None).is_err());

        // Fractions off.
        let bad = MINIMAL.replace("train = 0.6", "train = 0.7");
        assert!(ExperimentConfig::from_toml(&bad, None).is_err());
    }

    #[test]
    fn method_seeds_differ_by_method() {
        let a = ExperimentConfig::from_toml(MINIMAL, None).unwrap();
        let mut b = a.clone();
        b.method.name = "deterministic".to_string();
        assert_ne!(a.method_seed(), b.method_seed());
    }
}
