//! Causal self-attentive user encoder and dot-product scoring.
//!
//! Sequences are right-aligned: a sequence of length `L ≤ max_seq_len` is
//! left-padded, and its last item always receives the final positional row.

use thiserror::Error;

use crate::numkern::nn::{init_normal, SeqShape, TransformerBlock, INIT_STD};
use crate::numkern::tensor::matmul_raw;
use crate::numkern::{Graph, NumError, ParamId, ParamStore, Prng, Real, Tensor, Var};

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqEncoderConfig {
    pub max_seq_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: f64,
}

impl Default for SeqEncoderConfig {
    fn default() -> Self {
        Self { max_seq_len: 20, dim: 64, depth: 2, heads: 2, ffn_mult: 4.0 }
    }
}

impl SeqEncoderConfig {
    pub fn validate(&self) -> Result<(), SeqError> {
        if self.max_seq_len == 0 || self.dim == 0 {
            return Err(SeqError::Config("max_seq_len and dim must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(SeqError::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UserEncoder {
    pub config: SeqEncoderConfig,
    /// `max_seq_len x dim` learned absolute positions.
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl UserEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &SeqEncoderConfig, rng: &mut Prng) -> Result<Self, SeqError> {
        config.validate()?;
        let positions = store.add(format!("{name}.positions"), init_normal(rng, &[config.max_seq_len, config.dim], INIT_STD));
        let blocks = (0..config.depth)
            .map(|m| TransformerBlock::new(store, &format!("{name}.block{m}"), config.dim, config.heads, config.ffn_mult, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { config: config.clone(), positions, blocks })
    }

    pub fn param_count(config: &SeqEncoderConfig) -> usize {
        config.max_seq_len * config.dim + config.depth * TransformerBlock::param_count(config.dim, config.ffn_mult)
    }

    /// `items` holds `batch` sequences of `len` rows each (`batch·len x dim`,
    /// padding rows zero); `valid` flags the real items. Row `t` of each
    /// output sequence depends only on rows `≤ t` of its input.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, items: Var, batch: usize, len: usize, valid: Vec<bool>) -> Result<Var, SeqError> {
        let max = self.config.max_seq_len;
        if len > max {
            return Err(SeqError::TooLong { len, max });
        }
        if valid.len() != batch * len {
            return Err(SeqError::Config(format!("{} validity flags for {batch} x {len}", valid.len())));
        }
        let pos = g.param(self.positions);
        let pos = g.select_rows(pos, (max - len..max).collect())?;
        let mut h = g.add_tiled(items, pos)?;
        let shape = SeqShape { batch, len, causal: true, key_valid: Some(valid) };
        for b in &self.blocks {
            h = b.forward(g, h, &shape)?;
        }
        Ok(h)
    }
}

/// Plain inner products `P · Cᵀ`: one row per position, one column per candidate.
pub fn score<T: Real>(p: &Tensor<T>, candidates: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    matmul_raw(p, false, candidates, true)
}
