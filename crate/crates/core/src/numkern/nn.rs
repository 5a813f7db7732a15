//! Parameterised layers built from graph kernels.

use super::{AttnShape, Graph, NumError, ParamId, ParamStore, Prng, Real, Tensor, Var};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

pub fn init_normal<T: Real>(rng: &mut Prng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.truncated_normal(std))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// Affine map `x W + b` with `W: d_in x d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Prng) -> Self {
        let w = store.add(format!("{name}.weight"), init_normal(rng, &[d_in, d_out], INIT_STD));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NumError> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, dim }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NumError> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layernorm(x, gamma, beta, T::lit(LN_EPS))
    }
}

/// Multi-head self-attention. Query/key/value projections carry no bias;
/// the output projection does.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut Prng) -> Result<Self, NumError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumError::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        3 * Linear::param_count(dim, dim, false) + Linear::param_count(dim, dim, true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, shape: &SeqShape) -> Result<Var, NumError> {
        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, x)?;
        let v = self.wv.forward(g, x)?;
        let a = g.attention(
            q,
            k,
            v,
            AttnShape {
                batch: shape.batch,
                len: shape.len,
                heads: self.heads,
                causal: shape.causal,
                key_valid: shape.key_valid.clone(),
            },
        )?;
        self.out.forward(g, a)
    }
}

/// Gated-GELU feed-forward: `down(value * gelu(gate))` where
/// `[value | gate] = up(x)` and the hidden width is `ffn_mult * dim`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub fn ffn_hidden(dim: usize, ffn_mult: f64) -> usize {
    ((dim as f64) * ffn_mult).round().max(1.0) as usize
}

impl FeedForward {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, ffn_mult: f64, rng: &mut Prng) -> Self {
        let hidden = ffn_hidden(dim, ffn_mult);
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, 2 * hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn param_count(dim: usize, ffn_mult: f64) -> usize {
        let hidden = ffn_hidden(dim, ffn_mult);
        Linear::param_count(dim, 2 * hidden, true) + Linear::param_count(hidden, dim, true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, NumError> {
        let h = self.up.forward(g, x)?;
        let h = g.geglu(h)?;
        self.down.forward(g, h)
    }
}

/// How rows of a block input are grouped into sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqShape {
    pub batch: usize,
    pub len: usize,
    pub causal: bool,
    pub key_valid: Option<Vec<bool>>,
}

impl SeqShape {
    pub fn dense(batch: usize, len: usize, causal: bool) -> Self {
        Self { batch, len, causal, key_valid: None }
    }
}

/// Pre-LN residual block: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: f64,
        rng: &mut Prng,
    ) -> Result<Self, NumError> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_mult, rng),
        })
    }

    pub fn param_count(dim: usize, ffn_mult: f64) -> usize {
        2 * LayerNorm::param_count(dim) + SelfAttention::param_count(dim) + FeedForward::param_count(dim, ffn_mult)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, shape: &SeqShape) -> Result<Var, NumError> {
        let n1 = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, n1, shape)?;
        let h = g.add(x, a)?;
        let n2 = self.ln2.forward(g, h)?;
        let f = self.ffn.forward(g, n2)?;
        g.add(h, f)
    }
}
