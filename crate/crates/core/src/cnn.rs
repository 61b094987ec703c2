//! Config-driven convolutional baselines over one-hot input.
//!
//! A [`CnnConfig`] is an ordered layer list. Convolutions use stride 1 and no
//! padding; max-pooling uses a stride equal to its window. The last layer must
//! be `dense(1, sigmoid)`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encode::{one_hot_tokens, ALPHABET};
use crate::model::ModelError;
use crate::params::{glorot_uniform, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

fn relu() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "relu")]
        activation: Activation,
    },
    Maxpool {
        window: usize,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
}

fn four() -> usize {
    ALPHABET.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    #[serde(default)]
    pub name: String,
    pub input_length: usize,
    #[serde(default = "four")]
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

/// Activation volume between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Volume {
    Seq { len: usize, channels: usize },
    Flat(usize),
}

/// Shipped per-dataset configurations, keyed by dataset key.
pub const SHIPPED_CONFIGS: [(&str, &str); 7] = [
    ("arabidopsis_non_tata", include_str!("../../../configs/cnn/arabidopsis_non_tata.toml")),
    ("arabidopsis_tata", include_str!("../../../configs/cnn/arabidopsis_tata.toml")),
    ("bacillus", include_str!("../../../configs/cnn/bacillus.toml")),
    ("ecoli", include_str!("../../../configs/cnn/ecoli.toml")),
    ("human_non_tata", include_str!("../../../configs/cnn/human_non_tata.toml")),
    ("mouse_non_tata", include_str!("../../../configs/cnn/mouse_non_tata.toml")),
    ("mouse_tata", include_str!("../../../configs/cnn/mouse_tata.toml")),
];

impl CnnConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Config(format!("cnn config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Config(format!("cnn config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Default configuration shipped for a dataset key.
    pub fn shipped(dataset_key: &str) -> Option<Self> {
        SHIPPED_CONFIGS
            .iter()
            .find(|(k, _)| *k == dataset_key)
            .map(|(_, text)| Self::from_toml_str(text).expect("shipped configs parse"))
    }

    /// Propagates shapes through the layer list; returns the volume after
    /// each layer or names the first inconsistent one.
    pub fn validate(&self) -> Result<Vec<Volume>, ModelError> {
        let err = |i: usize, msg: String| ModelError::InvalidLayer { layer: i, reason: msg };
        if self.input_channels != ALPHABET.len() {
            return Err(ModelError::Config(format!(
                "input_channels: one-hot input has {} channels, got {}",
                ALPHABET.len(),
                self.input_channels
            )));
        }
        if self.input_length == 0 {
            return Err(ModelError::Config("input_length: must be positive".into()));
        }
        let mut vol = Volume::Seq {
            len: self.input_length,
            channels: self.input_channels,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            vol = match (layer, vol) {
                (LayerSpec::Conv { filters, kernel, .. }, Volume::Seq { len, .. }) => {
                    if *filters == 0 || *kernel == 0 {
                        return Err(err(i, "filters and kernel must be positive".into()));
                    }
                    if *kernel > len {
                        return Err(err(i, format!("kernel {kernel} longer than input length {len}")));
                    }
                    Volume::Seq {
                        len: len - kernel + 1,
                        channels: *filters,
                    }
                }
                (LayerSpec::Maxpool { window }, Volume::Seq { len, channels }) => {
                    if *window == 0 || *window > len {
                        return Err(err(i, format!("pool window {window} invalid for length {len}")));
                    }
                    Volume::Seq {
                        len: len / window,
                        channels,
                    }
                }
                (LayerSpec::Flatten, Volume::Seq { len, channels }) => Volume::Flat(len * channels),
                (LayerSpec::Dense { units, .. }, Volume::Flat(_)) => {
                    if *units == 0 {
                        return Err(err(i, "dense units must be positive".into()));
                    }
                    Volume::Flat(*units)
                }
                (layer, vol) => return Err(err(i, format!("{layer:?} cannot consume {vol:?}"))),
            };
            out.push(vol);
        }
        match self.layers.last() {
            Some(LayerSpec::Dense {
                units: 1,
                activation: Activation::Sigmoid,
            }) => Ok(out),
            _ => Err(err(
                self.layers.len().saturating_sub(1),
                "final layer must be dense(1, sigmoid)".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnProm {
    config: CnnConfig,
    params: ParamSet,
}

impl CnnProm {
    /// Validates `config` and initializes parameters from `seed`.
    pub fn build(config: CnnConfig, seed: u64) -> Result<Self, ModelError> {
        let volumes = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut prev = Volume::Seq {
            len: config.input_length,
            channels: config.input_channels,
        };
        for (i, (layer, &vol)) in config.layers.iter().zip(&volumes).enumerate() {
            match (layer, prev) {
                (LayerSpec::Conv { filters, kernel, .. }, Volume::Seq { channels, .. }) => {
                    params.push(
                        format!("layer{i}.kernels"),
                        glorot_uniform(&[*kernel, channels, *filters], kernel * channels, kernel * filters, &mut rng),
                    );
                    params.push(format!("layer{i}.bias"), Tensor::zeros(&[*filters]));
                }
                (LayerSpec::Dense { units, .. }, Volume::Flat(n)) => {
                    params.push(format!("layer{i}.weights"), glorot_uniform(&[n, *units], n, *units, &mut rng));
                    params.push(format!("layer{i}.bias"), Tensor::zeros(&[*units]));
                }
                _ => {}
            }
            prev = vol;
        }
        Ok(CnnProm { config, params })
    }

    pub fn from_params(config: CnnConfig, params: ParamSet) -> Result<Self, ModelError> {
        let reference = CnnProm::build(config.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(ModelError::Config(
                "cnnprom: parameter names or shapes do not match the architecture".into(),
            ));
        }
        Ok(CnnProm { config, params })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn var(&self, bound: &[Var], name: &str) -> Var {
        bound[self.params.position(name).expect("known parameter")]
    }

    /// Forward pass on a `L × 4` one-hot input; returns `(logit, prob)`.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], onehot: Var) -> Result<(Var, Var), ModelError> {
        let shape = g.shape(onehot);
        if shape != [self.config.input_length, self.config.input_channels] {
            return Err(ModelError::LengthMismatch {
                expected: self.config.input_length,
                found: shape.first().copied().unwrap_or(0),
            });
        }
        let mut x = onehot;
        let last = self.config.layers.len() - 1;
        for (i, layer) in self.config.layers.iter().enumerate() {
            x = match layer {
                LayerSpec::Conv { activation, .. } => {
                    let k = self.var(bound, &format!("layer{i}.kernels"));
                    let b = self.var(bound, &format!("layer{i}.bias"));
                    let y = g.conv1d(x, k, b, 1)?;
                    activate(g, y, *activation)
                }
                LayerSpec::Maxpool { window } => g.max_pool1d(x, *window)?,
                LayerSpec::Flatten => {
                    let n = g.shape(x).iter().product();
                    g.reshape(x, &[n])?
                }
                LayerSpec::Dense { units, activation } => {
                    let n = g.shape(x)[0];
                    let row = g.reshape(x, &[1, n])?;
                    let w = self.var(bound, &format!("layer{i}.weights"));
                    let y = g.matmul(row, w)?;
                    let y = g.reshape(y, &[*units])?;
                    let b = self.var(bound, &format!("layer{i}.bias"));
                    let y = g.add(y, b)?;
                    if i == last {
                        y
                    } else {
                        activate(g, y, *activation)
                    }
                }
            };
        }
        let logit = g.reshape(x, &[])?;
        let prob = g.sigmoid(logit);
        Ok((logit, prob))
    }

    pub fn example_loss(&self, g: &mut Graph, bound: &[Var], tokens: &[u8], label: u8) -> Result<Var, ModelError> {
        let x = g.constant(&one_hot_tokens(tokens));
        let (logit, _) = self.forward(g, bound, x)?;
        let l = g.bce_with_logits(logit, &[f64::from(label)])?;
        Ok(g.sum_all(l))
    }

    /// Probability for a one-hot encoded sequence, without gradients.
    pub fn forward_cnn(&self, onehot: &Tensor) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let x = g.constant(onehot);
        let (_, prob) = self.forward(&mut g, &bound, x)?;
        Ok(g.item(prob))
    }
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Linear => x,
    }
}
