//! Video aggregators: map a variable-length stack of frame embeddings to one
//! `D`-dimensional video embedding.
//!
//! The compressed video aggregator (CVA) runs
//!
//! ```text
//! z   = GELU(W_e · masked_mean(H) + b_e)          D -> L
//! Z_0 = [z; z; ...; z]                            K latent rows
//! Z_M = Block_M(... Block_1(Z_0))                 non-causal, pre-LN
//! e'  = GEGLU(W_d · mean_k(Z_M) + b_d)            L -> D
//! e_v = LayerNorm(e')
//! ```
//!
//! Because the replicated latents are identical and the blocks are
//! permutation-equivariant, the output does not depend on `K`.
//!
//! With `D = 384`, `L = 256` and GEGLU feed-forwards of width `4L`, a block
//! costs `16L² + 14L = 1,052,160` scalars and the rest `296,704`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::featstore::FrameFeatureMatrix;
use crate::numkern::nn::{FeedForward, LayerNorm, Linear, SeqShape, TransformerBlock};
use crate::numkern::{Graph, NumError, ParamStore, Prng, Real, Tensor, Var};

#[derive(Debug, Error)]
pub enum AggError {
    #[error("video {0:?} has no unmasked frames")]
    DegenerateInput(String),
    #[error("invalid aggregator config: {0}")]
    Config(String),
    #[error("video {id:?} has dim {got}, aggregator expects {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaConfig {
    pub dim_in: usize,
    pub dim_latent: usize,
    pub n_latents: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: f64,
}

impl Default for CvaConfig {
    fn default() -> Self {
        Self { dim_in: 384, dim_latent: 256, n_latents: 1, depth: 4, heads: 4, ffn_mult: 4.0 }
    }
}

impl CvaConfig {
    pub fn validate(&self) -> Result<(), AggError> {
        let bad = |m: String| Err(AggError::Config(m));
        if self.dim_in == 0 || self.dim_latent == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_latents == 0 {
            return bad("need at least one latent".into());
        }
        if self.heads == 0 || self.dim_latent % self.heads != 0 {
            return bad(format!("dim_latent {} not divisible by {} heads", self.dim_latent, self.heads));
        }
        if !(self.ffn_mult > 0.0 && self.ffn_mult.is_finite()) {
            return bad(format!("ffn_mult must be positive, got {}", self.ffn_mult));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregatorKind {
    Cva,
    /// Plain masked mean, no parameters.
    Pool,
    /// Masked mean followed by a `D x D` linear map.
    PoolLinear,
    /// Masked mean followed by a GEGLU feed-forward back to `D`.
    Mlp,
}

impl FromStr for AggregatorKind {
    type Err = AggError;
    fn from_str(s: &str) -> Result<Self, AggError> {
        match s {
            "cva" => Ok(Self::Cva),
            "pool" => Ok(Self::Pool),
            "pool_linear" => Ok(Self::PoolLinear),
            "mlp" => Ok(Self::Mlp),
            _ => Err(AggError::Config(format!("unknown aggregator {s:?} (cva, pool, pool_linear, mlp)"))),
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cva => "cva",
            Self::Pool => "pool",
            Self::PoolLinear => "pool_linear",
            Self::Mlp => "mlp",
        })
    }
}

/// Unmasked frames of several videos stacked into one matrix, with the rows
/// belonging to each video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch<T> {
    pub frames: Tensor<T>,
    pub segments: Vec<Vec<usize>>,
}

impl<T: Real> FrameBatch<T> {
    /// `masks[v][i] == false` drops frame `i` of video `v`.
    pub fn new(videos: &[&FrameFeatureMatrix], masks: Option<&[Vec<bool>]>) -> Result<Self, AggError> {
        let dim = videos.first().map_or(0, |m| m.dim);
        let mut data = Vec::new();
        let mut segments = Vec::with_capacity(videos.len());
        let mut rows = 0;
        for (v, m) in videos.iter().enumerate() {
            if m.dim != dim {
                return Err(AggError::DimMismatch { id: m.video_id.clone(), expected: dim, got: m.dim });
            }
            let mask = masks.map(|ms| &ms[v]);
            if mask.is_some_and(|mk| mk.len() != m.n_frames()) {
                return Err(AggError::Config(format!("mask length differs from frame count for {:?}", m.video_id)));
            }
            let mut seg = Vec::new();
            for i in 0..m.n_frames() {
                if mask.map_or(true, |mk| mk[i]) {
                    data.extend(m.row(i).iter().map(|&x| T::lit(f64::from(x))));
                    seg.push(rows);
                    rows += 1;
                }
            }
            if seg.is_empty() {
                return Err(AggError::DegenerateInput(m.video_id.clone()));
            }
            segments.push(seg);
        }
        Ok(Self { frames: Tensor::matrix(rows, dim, data)?, segments })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug)]
pub struct Cva {
    pub config: CvaConfig,
    pub encoder: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub decoder: Linear,
    pub out_norm: LayerNorm,
}

impl Cva {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &CvaConfig, rng: &mut Prng) -> Result<Self, AggError> {
        config.validate()?;
        let (d, l) = (config.dim_in, config.dim_latent);
        let encoder = Linear::new(store, &format!("{name}.encoder"), d, l, true, rng);
        let blocks = (0..config.depth)
            .map(|m| TransformerBlock::new(store, &format!("{name}.block{m}"), l, config.heads, config.ffn_mult, rng))
            .collect::<Result<_, _>>()?;
        let decoder = Linear::new(store, &format!("{name}.decoder"), l, 2 * d, true, rng);
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), d);
        Ok(Self { config: config.clone(), encoder, blocks, decoder, out_norm })
    }

    pub fn param_count(config: &CvaConfig) -> usize {
        let (d, l) = (config.dim_in, config.dim_latent);
        Linear::param_count(d, l, true)
            + config.depth * TransformerBlock::param_count(l, config.ffn_mult)
            + Linear::param_count(l, 2 * d, true)
            + LayerNorm::param_count(d)
    }

    /// Pooled, encoded and replicated latents: `(B·K) x L`, video-major.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, frames: Var, segments: Vec<Vec<usize>>) -> Result<Var, AggError> {
        let pooled = g.segment_mean(frames, segments)?;
        let z = self.encoder.forward(g, pooled)?;
        let z = g.gelu(z)?;
        Ok(g.repeat_rows(z, self.config.n_latents)?)
    }

    /// The block stack, attending only among the `K` latents of each video.
    pub fn reason<T: Real>(&self, g: &mut Graph<'_, T>, latents: Var, batch: usize) -> Result<Var, AggError> {
        let shape = SeqShape::dense(batch, self.config.n_latents, false);
        let mut z = latents;
        for b in &self.blocks {
            z = b.forward(g, z, &shape)?;
        }
        Ok(z)
    }

    /// Latent mean, decoder and output normalisation: `B x D`.
    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, latents: Var) -> Result<Var, AggError> {
        let z = g.group_mean(latents, self.config.n_latents)?;
        let e = self.decoder.forward(g, z)?;
        let e = g.geglu(e)?;
        Ok(self.out_norm.forward(g, e)?)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, frames: Var, segments: Vec<Vec<usize>>) -> Result<Var, AggError> {
        let batch = segments.len();
        let z = self.encode(g, frames, segments)?;
        let z = self.reason(g, z, batch)?;
        self.decode(g, z)
    }
}

#[derive(Clone, Debug)]
pub enum Aggregator {
    Cva(Cva),
    Pool { proj: Option<Linear> },
    Mlp { ffn: FeedForward },
}

impl Aggregator {
    pub fn new<T: Real>(kind: AggregatorKind, config: &CvaConfig, store: &mut ParamStore<T>, rng: &mut Prng) -> Result<Self, AggError> {
        config.validate()?;
        let d = config.dim_in;
        Ok(match kind {
            AggregatorKind::Cva => Self::Cva(Cva::new(store, "cva", config, rng)?),
            AggregatorKind::Pool => Self::Pool { proj: None },
            AggregatorKind::PoolLinear => Self::Pool { proj: Some(Linear::new(store, "pool.proj", d, d, true, rng)) },
            AggregatorKind::Mlp => Self::Mlp { ffn: FeedForward::new(store, "mlp", d, config.ffn_mult, rng) },
        })
    }

    pub fn kind(&self) -> AggregatorKind {
        match self {
            Self::Cva(_) => AggregatorKind::Cva,
            Self::Pool { proj: None } => AggregatorKind::Pool,
            Self::Pool { proj: Some(_) } => AggregatorKind::PoolLinear,
            Self::Mlp { .. } => AggregatorKind::Mlp,
        }
    }

    /// One embedding row per segment.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, frames: Var, segments: Vec<Vec<usize>>) -> Result<Var, AggError> {
        match self {
            Self::Cva(cva) => cva.forward(g, frames, segments),
            Self::Pool { proj } => {
                let pooled = g.segment_mean(frames, segments)?;
                match proj {
                    Some(p) => Ok(p.forward(g, pooled)?),
                    None => Ok(pooled),
                }
            }
            Self::Mlp { ffn } => {
                let pooled = g.segment_mean(frames, segments)?;
                Ok(ffn.forward(g, pooled)?)
            }
        }
    }

    /// Inference helper: embeddings for every video in `batch`, `B x D`.
    pub fn embed<T: Real>(&self, store: &ParamStore<T>, batch: &FrameBatch<T>) -> Result<Tensor<T>, AggError> {
        let mut g = Graph::with_params(store);
        let frames = g.constant(batch.frames.clone());
        let out = self.forward(&mut g, frames, batch.segments.clone())?;
        Ok(g.value(out).clone())
    }
}

/// Learnable scalars of an aggregator built from `config`.
pub fn param_count(kind: AggregatorKind, config: &CvaConfig) -> usize {
    let d = config.dim_in;
    match kind {
        AggregatorKind::Cva => Cva::param_count(config),
        AggregatorKind::Pool => 0,
        AggregatorKind::PoolLinear => Linear::param_count(d, d, true),
        AggregatorKind::Mlp => FeedForward::param_count(d, config.ffn_mult),
    }
}
