//! Encoder-decoder transformer producing per-step logits over the target
//! vocabulary. The logits are identical for both output heads; the head only
//! decides how they are turned into scores.

mod checkpoint;
mod forward;
mod infer;

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{bind_params, forward, forward_teacher_forced, ParamVars};
pub use infer::{decode_step, DecoderState, Transformer};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TokenId, NUM_RESERVED};
use crate::losses::LossSpec;
use crate::tensor::{Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Anything that yields next-token logits one step at a time. Decoders are
/// written against this so tests can plug in small table-driven models.
pub trait StepModel: Sync {
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;

    /// Fresh state for `source` with no target tokens consumed.
    fn start(&self, source: &[TokenId]) -> Result<Self::State>;

    /// Consumes `token` and returns logits for the following position.
    fn push(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>>;

    /// Drops consumed tokens beyond the first `len`.
    fn truncate(&self, state: &mut Self::State, len: usize);
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("decoder prefix must start with BOS")]
    MissingBos,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub tie_output_embedding: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, width 64, 4 heads.
    pub fn desk(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 128,
            source_vocab_size,
            target_vocab_size,
            max_positions: 64,
            dropout_rate: 0.1,
            seed: 0,
            tie_output_embedding: false,
        }
    }

    /// The full-size base configuration (6 layers, width 512, 8 heads).
    pub fn base(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        Self {
            num_layers: 6,
            num_heads: 8,
            d_model: 512,
            d_ff: 2048,
            max_positions: 256,
            ..Self::desk(source_vocab_size, target_vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0 || self.num_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width sizes must be positive".into());
        }
        if self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.source_vocab_size < NUM_RESERVED || self.target_vocab_size < NUM_RESERVED {
            return bad(format!("vocabulary sizes must be >= {NUM_RESERVED}"));
        }
        if self.max_positions < 2 {
            return bad("max_positions must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Canonical parameter names and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("src_embed".into(), vec![self.source_vocab_size, d]),
            ("tgt_embed".into(), vec![self.target_vocab_size, d]),
        ];
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.gain"), vec![d]));
            out.push((format!("{p}.bias"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.w{w}"), vec![d, d]));
                out.push((format!("{p}.b{w}"), vec![d]));
            }
        };
        let ff = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, self.d_ff]));
            out.push((format!("{p}.b1"), vec![self.d_ff]));
            out.push((format!("{p}.w2"), vec![self.d_ff, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for l in 0..self.num_layers {
            ln(&mut out, &format!("enc.{l}.ln1"));
            attn(&mut out, &format!("enc.{l}.self_attn"));
            ln(&mut out, &format!("enc.{l}.ln2"));
            ff(&mut out, &format!("enc.{l}.ff"));
        }
        ln(&mut out, "enc.ln_f");
        for l in 0..self.num_layers {
            ln(&mut out, &format!("dec.{l}.ln1"));
            attn(&mut out, &format!("dec.{l}.self_attn"));
            ln(&mut out, &format!("dec.{l}.ln2"));
            attn(&mut out, &format!("dec.{l}.cross_attn"));
            ln(&mut out, &format!("dec.{l}.ln3"));
            ff(&mut out, &format!("dec.{l}.ff"));
        }
        ln(&mut out, "dec.ln_f");
        if !self.tie_output_embedding {
            out.push(("out.w".into(), vec![d, self.target_vocab_size]));
        }
        out.push(("out.b".into(), vec![self.target_vocab_size]));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Deterministic initial parameters: weight matrices and embeddings are
/// `N(0, 1/d_model)`, layer-norm gains 1 and all biases 0.
pub fn init_params(config: &ModelConfig, loss: LossSpec) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("valid normal");
    let mut params = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if shape.len() == 1 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint {
        config: config.clone(),
        params,
        step: 0,
        optimizer: None,
        loss,
    })
}

/// Sinusoidal position encodings, `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}
