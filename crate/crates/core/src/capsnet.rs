//! CapsProm: embedding, convolution, primary capsules, digit capsules with
//! routing-by-agreement, and a dense sigmoid head.
//!
//! Layer layout for an `L`-base input:
//!
//! ```text
//! tokens[L] -> embedding[L × 9] -> conv(256, k=9, s=1, relu)[L1 × 256]
//!   -> conv(256, k=9, s=2, relu)[L2 × 256] -> reshape[L2·32 × 8] -> squash
//!   -> û = W·u [N × 2 × 16] -> routing -> caps[2 × 16]
//!   -> dense(128, relu) -> dense(1) -> sigmoid
//! ```
//!
//! Digit capsule 1 is the promoter class, capsule 0 the non-promoter class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encode::EmbeddingTable;
use crate::model::ModelError;
use crate::params::{glorot_uniform, normal, ParamSet};
use crate::tensor::{Graph, Result as TensorResult, Tensor, TensorError, Var};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapsPromConfig {
    pub seq_len: usize,
    pub embedding_dim: usize,
    pub conv_filters: usize,
    pub kernel_size: usize,
    pub conv_stride: usize,
    pub primary_filters: usize,
    pub primary_stride: usize,
    pub capsule_dim: usize,
    pub digit_dim: usize,
    pub routing_iters: usize,
    /// Width of the hidden dense layer; `None` connects the capsules straight
    /// to the output neuron.
    pub head_hidden: Option<usize>,
    pub squash_eps: f64,
    pub weight_init_std: f64,
}

impl Default for CapsPromConfig {
    fn default() -> Self {
        CapsPromConfig {
            seq_len: 81,
            embedding_dim: 9,
            conv_filters: 256,
            kernel_size: 9,
            conv_stride: 1,
            primary_filters: 256,
            primary_stride: 2,
            capsule_dim: 8,
            digit_dim: 16,
            routing_iters: 3,
            head_hidden: Some(128),
            squash_eps: 1e-9,
            weight_init_std: 0.01,
        }
    }
}

impl CapsPromConfig {
    pub fn for_length(seq_len: usize) -> Self {
        CapsPromConfig {
            seq_len,
            ..Default::default()
        }
    }

    pub fn conv_len(&self) -> usize {
        (self.seq_len - self.kernel_size) / self.conv_stride + 1
    }

    pub fn primary_len(&self) -> usize {
        (self.conv_len() - self.kernel_size) / self.primary_stride + 1
    }

    pub fn primary_channels(&self) -> usize {
        self.primary_filters / self.capsule_dim
    }

    /// Number of primary capsules feeding the routing stage.
    pub fn num_primary_capsules(&self) -> usize {
        self.primary_len() * self.primary_channels()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, msg: &str| Err(ModelError::Config(format!("capsprom.{field}: {msg}")));
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("conv_filters", self.conv_filters),
            ("kernel_size", self.kernel_size),
            ("conv_stride", self.conv_stride),
            ("primary_filters", self.primary_filters),
            ("primary_stride", self.primary_stride),
            ("capsule_dim", self.capsule_dim),
            ("digit_dim", self.digit_dim),
            ("routing_iters", self.routing_iters),
        ] {
            if v == 0 {
                return bad(name, "must be positive");
            }
        }
        if self.head_hidden == Some(0) {
            return bad("head_hidden", "must be positive when set");
        }
        if self.primary_filters % self.capsule_dim != 0 {
            return bad("primary_filters", "must be a multiple of capsule_dim");
        }
        if self.seq_len < self.kernel_size {
            return bad("seq_len", "shorter than the convolution kernel");
        }
        if self.conv_len() < self.kernel_size {
            return bad("seq_len", "too short for the primary capsule convolution");
        }
        if !(self.squash_eps > 0.0) || !(self.weight_init_std > 0.0) {
            return bad("squash_eps", "squash_eps and weight_init_std must be positive");
        }
        Ok(())
    }
}

/// Margin loss constants plus the weight of the auxiliary BCE head term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
    pub head_weight: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
            head_weight: 0.5,
        }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(ModelError::Config("loss: need 0 < m_minus < m_plus < 1".into()));
        }
        if !(self.lambda_down > 0.0) {
            return Err(ModelError::Config("loss.lambda_down: must be positive".into()));
        }
        if !(self.head_weight >= 0.0) {
            return Err(ModelError::Config("loss.head_weight: must be non-negative".into()));
        }
        Ok(())
    }
}

/// Coupling coefficients recorded at each routing iteration, row-major
/// `N_in × 2`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingTrace {
    pub couplings: Vec<Vec<f64>>,
}

/// Graph handles produced by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CapsOutput {
    pub primary: Var,
    pub caps: Var,
    pub lengths: Var,
    pub logit: Var,
    pub prob: Var,
}

/// Capsule squashing over the last axis.
pub fn squash(g: &mut Graph, s: Var, eps: f64) -> TensorResult<Var> {
    g.squash(s, eps)
}

/// Routing-by-agreement over predictions `u_hat[N × J × D]`.
///
/// Logits start at zero; each iteration takes a softmax over output capsules,
/// forms the coupled sum, squashes it and adds the agreement `û·v` to the
/// logits. Returns the final `J × D` output capsules.
pub fn route(
    g: &mut Graph,
    u_hat: Var,
    iters: usize,
    eps: f64,
    mut trace: Option<&mut RoutingTrace>,
) -> TensorResult<Var> {
    let shape = g.shape(u_hat).to_vec();
    if shape.len() != 3 || iters == 0 {
        return Err(TensorError::Invalid {
            op: "route",
            msg: format!("expected N × J × D predictions and iters ≥ 1, got {shape:?} / {iters}"),
        });
    }
    let (n, j) = (shape[0], shape[1]);
    let mut logits = g.constant_raw(vec![n, j], vec![0.0; n * j])?;
    let mut v = None;
    for it in 0..iters {
        let c = g.softmax(logits, 1)?;
        if let Some(t) = trace.as_deref_mut() {
            t.couplings.push(g.value(c).to_vec());
        }
        let c3 = g.reshape(c, &[n, j, 1])?;
        let weighted = g.mul(c3, u_hat)?;
        let s = g.sum(weighted, 0)?;
        let out = g.squash(s, eps)?;
        if it + 1 < iters {
            let prod = g.mul(u_hat, out)?;
            let agreement = g.sum(prod, 2)?;
            logits = g.add(logits, agreement)?;
        }
        v = Some(out);
    }
    Ok(v.expect("iters ≥ 1"))
}

/// Primary-capsule prediction vectors `û[i, j] = W[i, j] · u[i]`, then routing.
pub fn route_primary(
    g: &mut Graph,
    u: Var,
    w: Var,
    iters: usize,
    eps: f64,
    trace: Option<&mut RoutingTrace>,
) -> TensorResult<Var> {
    let u_hat = g.batched_matvec(w, u)?;
    route(g, u_hat, iters, eps, trace)
}

/// Margin loss plus the weighted BCE of the sigmoid head.
///
/// Margin part: `Σ_k T_k·max(0, m⁺−|v_k|)² + λ·(1−T_k)·max(0, |v_k|−m⁻)²`
/// with `T_k = 1` iff `k == label`.
pub fn loss(g: &mut Graph, out: &CapsOutput, label: u8, cfg: &MarginLossConfig) -> TensorResult<Var> {
    let margin = margin_loss(g, out.lengths, label, cfg)?;
    if cfg.head_weight == 0.0 {
        return Ok(margin);
    }
    let bce = g.bce_with_logits(out.logit, &[f64::from(label)])?;
    let bce = g.sum_all(bce);
    let weighted = g.affine(bce, cfg.head_weight, 0.0);
    g.add(margin, weighted)
}

pub fn margin_loss(g: &mut Graph, lengths: Var, label: u8, cfg: &MarginLossConfig) -> TensorResult<Var> {
    let target: Vec<f64> = (0..NUM_CLASSES).map(|k| f64::from(u8::from(k == label as usize))).collect();
    let present = g.constant_raw(vec![NUM_CLASSES], target.clone())?;
    let absent = g.constant_raw(
        vec![NUM_CLASSES],
        target.iter().map(|t| cfg.lambda_down * (1.0 - t)).collect(),
    )?;
    let up = g.affine(lengths, -1.0, cfg.m_plus);
    let up = g.relu(up);
    let up = g.square(up);
    let up = g.mul(up, present)?;
    let down = g.affine(lengths, 1.0, -cfg.m_minus);
    let down = g.relu(down);
    let down = g.square(down);
    let down = g.mul(down, absent)?;
    let total = g.add(up, down)?;
    Ok(g.sum_all(total))
}

/// Plain-number margin term for given capsule lengths.
pub fn margin_loss_value(lengths: [f64; NUM_CLASSES], label: u8, cfg: &MarginLossConfig) -> f64 {
    lengths
        .iter()
        .enumerate()
        .map(|(k, &len)| {
            if k == label as usize {
                (cfg.m_plus - len).max(0.0).powi(2)
            } else {
                cfg.lambda_down * (len - cfg.m_minus).max(0.0).powi(2)
            }
        })
        .sum()
}

/// Class decision; ties at the threshold go to the positive class.
pub fn predict(prob: f64, threshold: f64) -> u8 {
    u8::from(prob >= threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsProm {
    config: CapsPromConfig,
    loss: MarginLossConfig,
    params: ParamSet,
}

impl CapsProm {
    pub fn new(config: CapsPromConfig, loss: MarginLossConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut params = ParamSet::new();
        let table = EmbeddingTable::new(c.embedding_dim, &mut rng);
        params.push("embedding", table.weights().clone());
        let k = c.kernel_size;
        params.push(
            "conv1.kernels",
            glorot_uniform(&[k, c.embedding_dim, c.conv_filters], k * c.embedding_dim, k * c.conv_filters, &mut rng),
        );
        params.push("conv1.bias", Tensor::zeros(&[c.conv_filters]));
        params.push(
            "primary.kernels",
            glorot_uniform(&[k, c.conv_filters, c.primary_filters], k * c.conv_filters, k * c.primary_filters, &mut rng),
        );
        params.push("primary.bias", Tensor::zeros(&[c.primary_filters]));
        params.push(
            "digit.weights",
            normal(
                &[c.num_primary_capsules(), NUM_CLASSES, c.digit_dim, c.capsule_dim],
                c.weight_init_std,
                &mut rng,
            ),
        );
        let flat = NUM_CLASSES * c.digit_dim;
        let head_in = match c.head_hidden {
            Some(h) => {
                params.push("head.dense.weights", glorot_uniform(&[flat, h], flat, h, &mut rng));
                params.push("head.dense.bias", Tensor::zeros(&[h]));
                h
            }
            None => flat,
        };
        params.push("head.out.weights", glorot_uniform(&[head_in, 1], head_in, 1, &mut rng));
        params.push("head.out.bias", Tensor::zeros(&[1]));
        Ok(CapsProm { config, loss, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: CapsPromConfig, loss: MarginLossConfig, params: ParamSet) -> Result<Self, ModelError> {
        let reference = CapsProm::new(config.clone(), loss, 0)?;
        if !reference.params.same_layout(&params) {
            return Err(ModelError::Config(
                "capsprom: parameter names or shapes do not match the architecture".into(),
            ));
        }
        Ok(CapsProm { config, loss, params })
    }

    pub fn config(&self) -> &CapsPromConfig {
        &self.config
    }

    pub fn loss_config(&self) -> &MarginLossConfig {
        &self.loss
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

    /// Embedding, both convolutions, reshape and squash: `N_in × capsule_dim`.
    pub fn primary_caps(&self, g: &mut Graph, bound: &[Var], tokens: &[u8]) -> Result<Var, ModelError> {
        let c = &self.config;
        if tokens.len() != c.seq_len {
            return Err(ModelError::LengthMismatch {
                expected: c.seq_len,
                found: tokens.len(),
            });
        }
        let x = crate::encode::embed_tokens(g, self.var(bound, "embedding"), tokens)?;
        let h = g.conv1d(x, self.var(bound, "conv1.kernels"), self.var(bound, "conv1.bias"), c.conv_stride)?;
        let h = g.relu(h);
        let p = g.conv1d(
            h,
            self.var(bound, "primary.kernels"),
            self.var(bound, "primary.bias"),
            c.primary_stride,
        )?;
        let p = g.relu(p);
        let n_in = g.shape(p)[0] * c.primary_channels();
        let caps = g.reshape(p, &[n_in, c.capsule_dim])?;
        Ok(g.squash(caps, c.squash_eps)?)
    }

    /// Full forward pass on a tokenized sequence.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[Var],
        tokens: &[u8],
        trace: Option<&mut RoutingTrace>,
    ) -> Result<CapsOutput, ModelError> {
        let c = &self.config;
        let primary = self.primary_caps(g, bound, tokens)?;
        let caps = route_primary(
            g,
            primary,
            self.var(bound, "digit.weights"),
            c.routing_iters,
            c.squash_eps,
            trace,
        )?;
        let lengths = g.l2_norm(caps, 1)?;
        let mut h = g.reshape(caps, &[1, NUM_CLASSES * c.digit_dim])?;
        if c.head_hidden.is_some() {
            h = g.matmul(h, self.var(bound, "head.dense.weights"))?;
            let b = self.var(bound, "head.dense.bias");
            h = g.add(h, b)?;
            h = g.relu(h);
        }
        let z = g.matmul(h, self.var(bound, "head.out.weights"))?;
        let b = self.var(bound, "head.out.bias");
        let z = g.add(z, b)?;
        let logit = g.reshape(z, &[])?;
        let prob = g.sigmoid(logit);
        Ok(CapsOutput {
            primary,
            caps,
            lengths,
            logit,
            prob,
        })
    }

    pub fn example_loss(&self, g: &mut Graph, bound: &[Var], tokens: &[u8], label: u8) -> Result<Var, ModelError> {
        let out = self.forward(g, bound, tokens, None)?;
        Ok(loss(g, &out, label, &self.loss)?)
    }

    /// Digit capsules and probability for one sequence, without gradients.
    pub fn infer(&self, tokens: &[u8]) -> Result<(Tensor, f64), ModelError> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &bound, tokens, None)?;
        Ok((g.to_tensor(out.caps), g.item(out.prob)))
    }
}
