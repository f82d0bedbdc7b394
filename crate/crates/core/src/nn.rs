//! Feed-forward networks with dropout placement and layer freezing.
//!
//! A model is a stack of affine layers with an activation and an inverted
//! dropout rate per hidden layer, plus a linear output layer. Forward
//! passes come in two flavours: a plain evaluation path for inference and
//! a tape-recorded path for training. Both share dropout masks, so a
//! sampled pass at inference (MC dropout) sees exactly the distribution
//! the training loop used. Checkpoints are versioned JSON with explicit
//! shapes; floats print in shortest round-trip decimal so reloads
//! reproduce forward outputs bit-exactly.

use crate::rng::{child_seed_indexed, Rng};
use crate::tape::{Tape, VarId};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("config: {0}")]
    Config(String),
    #[error("input has {got} features, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("checkpoint version {found} unsupported (expected {CHECKPOINT_VERSION})")]
    CheckpointVersion { found: u32 },
    #[error("checkpoint malformed: {0}")]
    CheckpointMalformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture and initialization spec for [`MlpModel::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// One rate in `[0, 1)` per hidden layer.
    pub dropout: Vec<f64>,
    pub init_seed: u64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NnError::Config("input and output dims must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(NnError::Config("hidden sizes must be positive".into()));
        }
        if self.dropout.len() != self.hidden.len() {
            return Err(NnError::Config(format!(
                "need one dropout rate per hidden layer ({} rates for {} layers)",
                self.dropout.len(),
                self.hidden.len()
            )));
        }
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(NnError::Config("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `in x out` weight matrix.
    pub weights: Tensor,
    /// `1 x out` bias row.
    pub bias: Tensor,
    /// None on the linear output layer.
    pub activation: Option<Activation>,
    /// Inverted-dropout rate applied to this layer's activations.
    pub dropout: f64,
}

/// Whether dropout masks are sampled during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum DropoutMode {
    Off,
    Sampled { seed: u64 },
}

/// Output and last-hidden features of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor,
    /// Activations feeding the output layer (`phi(x)`); equals the input
    /// for a model without hidden layers.
    pub features: Tensor,
}

/// Tape nodes produced by a recorded forward pass.
pub struct TapedForward {
    pub output: VarId,
    pub features: VarId,
    /// `(weights, bias)` parameter slots, one pair per layer.
    pub layer_slots: Vec<(VarId, VarId)>,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<Layer>,
    frozen: Vec<bool>,
    input_dim: usize,
    feature_dim: usize,
    output_dim: usize,
}

impl MlpModel {
    /// Initialize from a config: weights are fan-in scaled normals
    /// (`std = 1/sqrt(fan_in)`), biases zero, all reproducible from
    /// `init_seed`.
    pub fn build(config: &MlpConfig) -> Result<Self, NnError> {
        config.validate()?;
        let mut dims = vec![config.input_dim];
        dims.extend_from_slice(&config.hidden);
        dims.push(config.output_dim);

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let mut rng = Rng::new(child_seed_indexed(config.init_seed, "layer", i));
            let std = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
            let last = i == dims.len() - 2;
            layers.push(Layer {
                weights: Tensor::from_vec(vec![fan_in, fan_out], w)?,
                bias: Tensor::zeros(vec![1, fan_out]),
                activation: if last { None } else { Some(config.activation) },
                dropout: if last { 0.0 } else { config.dropout[i] },
            });
        }
        let feature_dim = *dims.get(dims.len() - 2).expect("at least two dims");
        Ok(MlpModel {
            layers,
            frozen: vec![false; dims.len() - 1],
            input_dim: config.input_dim,
            feature_dim,
            output_dim: config.output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        self.frozen[layer] = frozen;
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| l.dropout > 0.0)
    }

    /// Replace a layer's parameters (the optimizer's write path).
    pub fn set_layer_params(&mut self, layer: usize, weights: Tensor, bias: Tensor) {
        self.layers[layer].weights = weights;
        self.layers[layer].bias = bias;
    }

    /// All parameters flattened into one vector (SWAG's view).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(layer.bias.data());
        }
        out
    }

    /// Inverse of [`Self::flatten_params`].
    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<(), NnError> {
        let expected: usize = self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        if flat.len() != expected {
            return Err(NnError::Config(format!(
                "flat parameter vector has {} entries, model needs {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let wlen = layer.weights.len();
            layer.weights =
                Tensor::from_vec(layer.weights.shape().to_vec(), flat[offset..offset + wlen].to_vec())?;
            offset += wlen;
            let blen = layer.bias.len();
            layer.bias =
                Tensor::from_vec(layer.bias.shape().to_vec(), flat[offset..offset + blen].to_vec())?;
            offset += blen;
        }
        Ok(())
    }

    fn dropout_mask(rng: &mut Rng, n: usize, width: usize, rate: f64) -> Tensor {
        let keep_scale = 1.0 / (1.0 - rate);
        let data: Vec<f64> = (0..n * width)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep_scale })
            .collect();
        Tensor::from_vec(vec![n, width], data).expect("shape matches")
    }

    /// Plain forward pass. `Sampled` mode draws per-layer inverted-dropout
    /// masks from a stream derived from the given seed; identical seeds
    /// give identical outputs.
    pub fn forward(&self, x: &Tensor, mode: DropoutMode) -> Result<ForwardPass, NnError> {
        let n = x.rows()?;
        if x.cols()? != self.input_dim {
            return Err(NnError::InputDim {
                expected: self.input_dim,
                got: x.cols()?,
            });
        }
        let mut h = x.clone();
        let mut features = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weights)?;
            let cols = layer.bias.len();
            let zdata = z.data_mut();
            for i in 0..n {
                for j in 0..cols {
                    zdata[i * cols + j] += layer.bias.data()[j];
                }
            }
            z.ensure_finite("forward")?;
            if let Some(act) = layer.activation {
                z = match act {
                    Activation::Relu => z.map("relu", |v| v.max(0.0))?,
                    Activation::Tanh => z.map("tanh", f64::tanh)?,
                };
                if layer.dropout > 0.0 {
                    if let DropoutMode::Sampled { seed } = mode {
                        let mut rng = Rng::new(child_seed_indexed(seed, "dropout-layer", li));
                        let mask = Self::dropout_mask(&mut rng, n, z.cols()?, layer.dropout);
                        z = z.mul(&mask)?;
                    }
                }
                features = z.clone();
            }
            h = z;
        }
        Ok(ForwardPass {
            output: h,
            features,
        })
    }

    /// Tape-recorded forward pass for training. Registers every layer's
    /// weights and bias as parameter slots (two slots per layer, in layer
    /// order).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mode: DropoutMode,
    ) -> Result<TapedForward, NnError> {
        let n = x.rows()?;
        if x.cols()? != self.input_dim {
            return Err(NnError::InputDim {
                expected: self.input_dim,
                got: x.cols()?,
            });
        }
        let mut slots = Vec::with_capacity(self.layers.len());
        let mut h = tape.constant(x.clone());
        let mut features = h;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weights.clone());
            let b = tape.param(layer.bias.clone());
            slots.push((w, b));
            let z = tape.matmul(h, w)?;
            let bb = tape.broadcast_rows(b, n)?;
            let mut z = tape.add(z, bb)?;
            if let Some(act) = layer.activation {
                z = match act {
                    Activation::Relu => tape.relu(z)?,
                    Activation::Tanh => tape.tanh(z)?,
                };
                if layer.dropout > 0.0 {
                    if let DropoutMode::Sampled { seed } = mode {
                        let mut rng = Rng::new(child_seed_indexed(seed, "dropout-layer", li));
                        let width = tape.value(z).cols()?;
                        let mask = Self::dropout_mask(&mut rng, n, width, layer.dropout);
                        let mask = tape.constant(mask);
                        z = tape.mul(z, mask)?;
                    }
                }
                features = z;
            }
            h = z;
        }
        Ok(TapedForward {
            output: h,
            features,
            layer_slots: slots,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.save_string()?)?;
        Ok(())
    }

    pub fn save_string(&self) -> Result<String, NnError> {
        let doc = CheckpointDoc {
            version: CHECKPOINT_VERSION,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            feature_dim: self.feature_dim,
            frozen: self.frozen.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                    dropout: l.dropout,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc)
            .map_err(|e| NnError::CheckpointMalformed(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        Self::load_string(&text)
    }

    pub fn load_string(text: &str) -> Result<Self, NnError> {
        // Peek the version before strict decoding so a version bump gets
        // its own error rather than a field mismatch.
        let probe: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| NnError::CheckpointMalformed(e.to_string()))?;
        let found = probe
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| NnError::CheckpointMalformed("missing version field".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(NnError::CheckpointVersion { found: found as u32 });
        }
        let doc: CheckpointDoc = serde_json::from_str(text)
            .map_err(|e| NnError::CheckpointMalformed(e.to_string()))?;
        doc.into_model()
    }
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    weights: Tensor,
    bias: Tensor,
    activation: Option<Activation>,
    dropout: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    input_dim: usize,
    output_dim: usize,
    feature_dim: usize,
    frozen: Vec<bool>,
    layers: Vec<LayerDoc>,
}

impl CheckpointDoc {
    fn into_model(self) -> Result<MlpModel, NnError> {
        if self.layers.is_empty() {
            return Err(NnError::CheckpointMalformed("no layers".into()));
        }
        if self.frozen.len() != self.layers.len() {
            return Err(NnError::CheckpointMalformed(
                "frozen flags do not match layer count".into(),
            ));
        }
        let mut prev = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = (layer.weights.rows()?, layer.weights.cols()?);
            if rows != prev {
                return Err(NnError::CheckpointMalformed(format!(
                    "layer {i} expects {prev} inputs, weights have {rows} rows"
                )));
            }
            if layer.bias.len() != cols {
                return Err(NnError::CheckpointMalformed(format!(
                    "layer {i} bias length {} does not match {cols} outputs",
                    layer.bias.len()
                )));
            }
            prev = cols;
        }
        if prev != self.output_dim {
            return Err(NnError::CheckpointMalformed(format!(
                "last layer produces {prev} outputs, header says {}",
                self.output_dim
            )));
        }
        Ok(MlpModel {
            layers: self
                .layers
                .into_iter()
                .map(|l| Layer {
                    weights: l.weights,
                    bias: l.bias,
                    activation: l.activation,
                    dropout: l.dropout,
                })
                .collect(),
            frozen: self.frozen,
            input_dim: self.input_dim,
            feature_dim: self.feature_dim,
            output_dim: self.output_dim,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> MlpConfig {
        MlpConfig {
            input_dim: 1,
            hidden: vec![16, 16],
            output_dim: 2,
            activation: Activation::Relu,
            dropout: vec![0.0, 0.0],
            init_seed: 11,
        }
    }

    fn probe_batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_vec(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn build_is_deterministic_with_expected_shapes() {
        let a = MlpModel::build(&config()).unwrap();
        let b = MlpModel::build(&config()).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.weights.data(), lb.weights.data());
        }
        assert_eq!(a.layers()[0].weights.shape(), &[1, 16]);
        assert_eq!(a.layers()[1].weights.shape(), &[16, 16]);
        assert_eq!(a.layers()[2].weights.shape(), &[16, 2]);
        assert_eq!(a.feature_dim(), 16);
    }

    #[test]
    fn zero_dims_rejected_but_linear_model_allowed() {
        let mut bad = config();
        bad.output_dim = 0;
        assert!(MlpModel::build(&bad).is_err());

        let linear = MlpConfig {
            input_dim: 3,
            hidden: vec![],
            output_dim: 1,
            activation: Activation::Tanh,
            dropout: vec![],
            init_seed: 0,
        };
        let model = MlpModel::build(&linear).unwrap();
        assert_eq!(model.num_layers(), 1);
        assert_eq!(model.feature_dim(), 3);
        let x = probe_batch(4, 3, 1);
        let fwd = model.forward(&x, DropoutMode::Off).unwrap();
        assert_eq!(fwd.features.data(), x.data());
    }

    // The init scheme targets std = 1/sqrt(fan_in); check the sample std
    // of first-layer weights pooled over 10 seeds.
    #[test]
    fn init_std_matches_fan_in_scheme() {
        let mut values = Vec::new();
        for seed in 0..10 {
            let cfg = MlpConfig {
                input_dim: 64,
                hidden: vec![32],
                output_dim: 1,
                activation: Activation::Relu,
                dropout: vec![0.0],
                init_seed: seed,
            };
            let model = MlpModel::build(&cfg).unwrap();
            values.extend_from_slice(model.layers()[0].weights.data());
        }
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let var: f64 =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        let target = 1.0 / 8.0; // 1/sqrt(64)
        assert!(
            (var.sqrt() - target).abs() / target < 0.2,
            "sample std {} target {target}",
            var.sqrt()
        );
    }

    #[test]
    fn dropout_off_and_zero_rate_agree() {
        let model = MlpModel::build(&config()).unwrap();
        let x = probe_batch(5, 1, 2);
        let off = model.forward(&x, DropoutMode::Off).unwrap();
        let sampled = model.forward(&x, DropoutMode::Sampled { seed: 3 }).unwrap();
        assert_eq!(off.output.data(), sampled.output.data());
    }

    #[test]
    fn sampled_dropout_reproducible_per_seed() {
        let mut cfg = config();
        cfg.dropout = vec![0.5, 0.5];
        let model = MlpModel::build(&cfg).unwrap();
        let x = probe_batch(5, 1, 2);
        let a = model.forward(&x, DropoutMode::Sampled { seed: 9 }).unwrap();
        let b = model.forward(&x, DropoutMode::Sampled { seed: 9 }).unwrap();
        assert_eq!(a.output.data(), b.output.data());
        let c = model.forward(&x, DropoutMode::Sampled { seed: 10 }).unwrap();
        assert_ne!(a.output.data(), c.output.data());
    }

    // Inverted dropout preserves expectations: the mean over many sampled
    // passes approaches the off-mode activations.
    #[test]
    fn inverted_dropout_expectation() {
        let cfg = MlpConfig {
            input_dim: 1,
            hidden: vec![8],
            output_dim: 1,
            activation: Activation::Tanh,
            dropout: vec![0.5],
            init_seed: 4,
        };
        let model = MlpModel::build(&cfg).unwrap();
        let x = probe_batch(1, 1, 5);
        let off = model.forward(&x, DropoutMode::Off).unwrap();
        let passes = 10_000;
        let mut acc = vec![0.0; off.features.len()];
        for t in 0..passes {
            let fwd = model
                .forward(&x, DropoutMode::Sampled { seed: child_seed_indexed(77, "pass", t) })
                .unwrap();
            for (a, v) in acc.iter_mut().zip(fwd.features.data()) {
                *a += v;
            }
        }
        for (a, target) in acc.iter().zip(off.features.data()) {
            let mean = a / passes as f64;
            if target.abs() > 0.05 {
                assert!(
                    (mean - target).abs() / target.abs() < 0.05,
                    "mean activation {mean} vs off-mode {target}"
                );
            }
        }
    }

    #[test]
    fn tape_and_eval_forward_agree() {
        let mut cfg = config();
        cfg.dropout = vec![0.3, 0.3];
        let model = MlpModel::build(&cfg).unwrap();
        let x = probe_batch(6, 1, 8);
        let mode = DropoutMode::Sampled { seed: 13 };
        let eval = model.forward(&x, mode).unwrap();
        let mut tape = Tape::new();
        let taped = model.forward_on_tape(&mut tape, &x, mode).unwrap();
        assert_eq!(tape.value(taped.output).data(), eval.output.data());
        assert_eq!(tape.value(taped.features).data(), eval.features.data());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mut cfg = config();
        cfg.dropout = vec![0.25, 0.0];
        let mut model = MlpModel::build(&cfg).unwrap();
        model.set_frozen(1, true);
        let text = model.save_string().unwrap();
        let loaded = MlpModel::load_string(&text).unwrap();
        let x = probe_batch(7, 1, 21);
        let a = model.forward(&x, DropoutMode::Off).unwrap();
        let b = loaded.forward(&x, DropoutMode::Off).unwrap();
        assert_eq!(a.output.data(), b.output.data());
        assert_eq!(loaded.frozen_flags(), &[false, true, false]);
        assert_eq!(loaded.layers()[0].dropout, 0.25);
    }

    #[test]
    fn checkpoint_rejects_corruption_and_wrong_version() {
        let model = MlpModel::build(&config()).unwrap();
        let text = model.save_string().unwrap();

        let wrong_version = text.replacen("\"version\": 1", "\"version\": 99", 1);
        assert!(matches!(
            MlpModel::load_string(&wrong_version),
            Err(NnError::CheckpointVersion { found: 99 })
        ));

        // Corrupt a shape: claim 17 input rows for 16 values. The load
        // must fail instead of silently misreading the data.
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["layers"][0]["weights"]["shape"][0] = serde_json::json!(17);
        let corrupted = serde_json::to_string(&doc).unwrap();
        assert!(MlpModel::load_string(&corrupted).is_err());
    }
}
