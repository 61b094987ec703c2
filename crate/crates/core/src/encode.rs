//! Nucleotide vocabulary, one-hot encoding and the trainable embedding table.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Result as TensorResult, Tensor, Var};

/// The four-letter DNA alphabet in index order.
pub const ALPHABET: [char; 4] = ['A', 'C', 'G', 'T'];

pub const DEFAULT_EMBEDDING_DIM: usize = 9;

/// Half-width of the uniform range used to initialize embeddings.
pub const EMBEDDING_INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid nucleotide {found:?} at position {position}")]
pub struct InvalidSymbol {
    pub position: usize,
    pub found: char,
}

/// Index of a nucleotide in [`ALPHABET`]; lowercase is accepted.
pub fn symbol_index(c: char) -> Option<usize> {
    match c.to_ascii_uppercase() {
        'A' => Some(0),
        'C' => Some(1),
        'G' => Some(2),
        'T' => Some(3),
        _ => None,
    }
}

/// Maps a sequence to vocabulary indices, rejecting anything outside ACGT.
pub fn tokenize(seq: &str) -> Result<Vec<u8>, InvalidSymbol> {
    seq.chars()
        .enumerate()
        .map(|(position, c)| {
            symbol_index(c)
                .map(|i| i as u8)
                .ok_or(InvalidSymbol { position, found: c })
        })
        .collect()
}

/// `L × 4` one-hot matrix from already validated tokens.
pub fn one_hot_tokens(tokens: &[u8]) -> Tensor {
    let mut data = vec![0.0; tokens.len() * 4];
    for (row, &t) in tokens.iter().enumerate() {
        data[row * 4 + t as usize] = 1.0;
    }
    Tensor::new(vec![tokens.len(), 4], data).expect("shape matches")
}

/// `L × 4` one-hot matrix; row `t` is the indicator of `seq[t]`.
pub fn one_hot(seq: &str) -> Result<Tensor, InvalidSymbol> {
    Ok(one_hot_tokens(&tokenize(seq)?))
}

/// Learned dense vector per nucleotide: a `4 × dim` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    weights: Tensor,
}

impl EmbeddingTable {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        let data = (0..ALPHABET.len() * dim)
            .map(|_| rng.gen_range(-EMBEDDING_INIT_RANGE..=EMBEDDING_INIT_RANGE))
            .collect();
        EmbeddingTable {
            weights: Tensor::new(vec![ALPHABET.len(), dim], data)
                .expect("shape matches")
                .with_grad(),
        }
    }

    pub fn from_weights(weights: Tensor) -> TensorResult<Self> {
        if weights.rank() != 2 || weights.shape()[0] != ALPHABET.len() || weights.shape()[1] == 0 {
            return Err(crate::tensor::TensorError::Invalid {
                op: "embedding",
                msg: format!("table must be 4 × d, got {:?}", weights.shape()),
            });
        }
        Ok(EmbeddingTable {
            weights: weights.with_grad(),
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn row(&self, symbol: usize) -> &[f64] {
        let d = self.dim();
        &self.weights.data()[symbol * d..(symbol + 1) * d]
    }
}

/// Looks up `tokens` in an embedding table already placed on the graph.
pub fn embed_tokens(g: &mut Graph, table: Var, tokens: &[u8]) -> TensorResult<Var> {
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    g.embedding(table, &idx)
}

/// `L × d` embedding of `seq`. The table enters the graph as a parameter, so
/// its gradient can be read back with [`Graph::grad`] on the returned table var.
pub fn embed(g: &mut Graph, seq: &str, table: &EmbeddingTable) -> Result<(Var, Var), EmbedError> {
    let tokens = tokenize(seq)?;
    let t = g.param(table.weights());
    Ok((embed_tokens(g, t, &tokens)?, t))
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Symbol(#[from] InvalidSymbol),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}
