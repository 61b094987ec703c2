//! Model-family dispatch shared by training, evaluation and checkpoints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsnet::{CapsProm, CapsPromConfig, MarginLossConfig};
use crate::cnn::{CnnConfig, CnnProm};
use crate::encode::one_hot_tokens;
use crate::params::ParamSet;
use crate::tensor::{Graph, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },
    #[error("sequence length {found} does not match model input length {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: ModelKind, found: ModelKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    CapsProm,
    CnnProm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::CapsProm => "capsprom",
            ModelKind::CnnProm => "cnnprom",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "capsprom" => Ok(ModelKind::CapsProm),
            "cnnprom" => Ok(ModelKind::CnnProm),
            other => Err(format!("unknown model kind {other:?} (expected capsprom or cnnprom)")),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    CapsProm {
        config: CapsPromConfig,
        loss: MarginLossConfig,
    },
    CnnProm {
        config: CnnConfig,
    },
}

impl Architecture {
    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::CapsProm { .. } => ModelKind::CapsProm,
            Architecture::CnnProm { .. } => ModelKind::CnnProm,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Architecture::CapsProm { config, .. } => config.seq_len,
            Architecture::CnnProm { config } => config.input_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    CapsProm(CapsProm),
    CnnProm(CnnProm),
}

impl Model {
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self, ModelError> {
        Ok(match arch {
            Architecture::CapsProm { config, loss } => Model::CapsProm(CapsProm::new(config.clone(), *loss, seed)?),
            Architecture::CnnProm { config } => Model::CnnProm(CnnProm::build(config.clone(), seed)?),
        })
    }

    pub fn from_params(arch: &Architecture, params: ParamSet) -> Result<Self, ModelError> {
        Ok(match arch {
            Architecture::CapsProm { config, loss } => {
                Model::CapsProm(CapsProm::from_params(config.clone(), *loss, params)?)
            }
            Architecture::CnnProm { config } => Model::CnnProm(CnnProm::from_params(config.clone(), params)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::CapsProm(_) => ModelKind::CapsProm,
            Model::CnnProm(_) => ModelKind::CnnProm,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Model::CapsProm(m) => Architecture::CapsProm {
                config: m.config().clone(),
                loss: *m.loss_config(),
            },
            Model::CnnProm(m) => Architecture::CnnProm {
                config: m.config().clone(),
            },
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Model::CapsProm(m) => m.config().seq_len,
            Model::CnnProm(m) => m.config().input_length,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::CapsProm(m) => m.params(),
            Model::CnnProm(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::CapsProm(m) => m.params_mut(),
            Model::CnnProm(m) => m.params_mut(),
        }
    }

    /// Per-example training loss on a graph with parameters already bound.
    pub fn example_loss(&self, g: &mut Graph, bound: &[Var], tokens: &[u8], label: u8) -> Result<Var, ModelError> {
        match self {
            Model::CapsProm(m) => m.example_loss(g, bound, tokens, label),
            Model::CnnProm(m) => m.example_loss(g, bound, tokens, label),
        }
    }

    fn prob_var(&self, g: &mut Graph, bound: &[Var], tokens: &[u8]) -> Result<Var, ModelError> {
        match self {
            Model::CapsProm(m) => Ok(m.forward(g, bound, tokens, None)?.prob),
            Model::CnnProm(m) => {
                let x = g.constant(&one_hot_tokens(tokens));
                Ok(m.forward(g, bound, x)?.1)
            }
        }
    }

    /// Promoter probability for each tokenized sequence.
    pub fn predict_proba<'a>(&self, seqs: impl IntoIterator<Item = &'a [u8]>) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let bound = self.params().bind_frozen(&mut g);
        let mark = g.len();
        let mut out = Vec::new();
        for tokens in seqs {
            let p = self.prob_var(&mut g, &bound, tokens)?;
            out.push(g.item(p));
            g.truncate(mark);
        }
        Ok(out)
    }

    pub fn predict_one(&self, tokens: &[u8]) -> Result<f64, ModelError> {
        Ok(self.predict_proba([tokens])?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        assert_eq!("CapsProm".parse::<ModelKind>().unwrap(), ModelKind::CapsProm);
        assert_eq!("cnnprom".parse::<ModelKind>().unwrap(), ModelKind::CnnProm);
        assert!("lstm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn batched_prediction_matches_single() {
        let arch = Architecture::CnnProm {
            config: CnnConfig::shipped("bacillus").unwrap(),
        };
        let m = Model::build(&arch, 4).unwrap();
        let a: Vec<u8> = (0..81).map(|i| (i % 4) as u8).collect();
        let b: Vec<u8> = (0..81).map(|i| ((i / 3) % 4) as u8).collect();
        let both = m.predict_proba([a.as_slice(), b.as_slice()]).unwrap();
        assert_eq!(both[0], m.predict_one(&a).unwrap());
        assert_eq!(both[1], m.predict_one(&b).unwrap());
    }
}
