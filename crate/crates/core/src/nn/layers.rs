use candle_core::{DType, Device, Result, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{from_f64, softmax_last};
use super::params::{Init, Params};

/// Forward-pass mode. Dropout is active only when the context carries an RNG.
pub struct Ctx {
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in x out]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &Params, input: usize, output: usize) -> Result<Self> {
        Self::with_init(p, input, output, Init::XavierUniform, Some(Init::Zeros))
    }

    pub fn with_init(
        p: &Params,
        input: usize,
        output: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        Ok(Self {
            weight: p.get((input, output), "weight", weight)?,
            bias: bias.map(|b| p.get(output, "bias", b)).transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get(dim, "gamma", Init::Const(1.0))?,
            beta: p.get(dim, "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let Some(rng) = ctx.rng.as_mut() else {
            return Ok(x.clone());
        };
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let scale = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { scale })
            .collect();
        let mask = from_f64(&mask, x.dims(), x.dtype(), x.device())?;
        x.mul(&mask)
    }
}

/// Multi-head scaled dot-product attention over unbatched `[L x D]` inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            candle_core::bail!("hidden dim {dim} not divisible by {heads} heads");
        }
        Ok(Self {
            q_proj: Linear::new(&p.pp("q"), dim, dim)?,
            k_proj: Linear::new(&p.pp("k"), dim, dim)?,
            v_proj: Linear::new(&p.pp("v"), dim, dim)?,
            out_proj: Linear::new(&p.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (l, d) = x.dims2()?;
        x.reshape((l, self.heads, d / self.heads))?
            .transpose(0, 1)?
            .contiguous()
    }

    /// Attention probabilities `[H x Lq x Lk]`.
    pub fn weights(&self, query: &Tensor, key: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.q_proj.forward(query)?)?;
        let k = self.split_heads(&self.k_proj.forward(key)?)?;
        let head_dim = q.dim(2)? as f64;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / head_dim.sqrt())?;
        softmax_last(&scores)
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let attn = self.weights(query, key)?;
        let v = self.split_heads(&self.v_proj.forward(value)?)?;
        let (lq, d) = (query.dim(0)?, self.out_proj.out_dim());
        let mixed = attn.matmul(&v)?.transpose(0, 1)?.reshape((lq, d))?;
        self.out_proj.forward(&mixed)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub dropout: Dropout,
}

impl FeedForward {
    pub fn new(p: &Params, dim: usize, hidden: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&p.pp("up"), dim, hidden)?,
            down: Linear::new(&p.pp("down"), hidden, dim)?,
            dropout: Dropout { p: dropout },
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let h = self.dropout.forward(&self.up.forward(x)?.relu()?, ctx)?;
        self.down.forward(&h)
    }
}

/// Shared hyper-parameters of every attention layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

/// Post-norm encoder layer. Positional encodings are added to queries and
/// keys only.
#[derive(Debug, Clone)]
pub struct SelfAttentionLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
    dropout: Dropout,
}

impl SelfAttentionLayer {
    pub fn new(p: &Params, cfg: AttnConfig) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&p.pp("attn"), cfg.dim, cfg.heads)?,
            norm1: LayerNorm::new(&p.pp("norm1"), cfg.dim)?,
            ffn: FeedForward::new(&p.pp("ffn"), cfg.dim, cfg.ffn_dim, cfg.dropout)?,
            norm2: LayerNorm::new(&p.pp("norm2"), cfg.dim)?,
            dropout: Dropout { p: cfg.dropout },
        })
    }

    pub fn forward(&self, x: &Tensor, pos: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        let qk = match pos {
            Some(pos) => (x + pos)?,
            None => x.clone(),
        };
        let a = self.attn.forward(&qk, &qk, x)?;
        let x = self.norm1.forward(&(x + self.dropout.forward(&a, ctx)?)?)?;
        let f = self.ffn.forward(&x, ctx)?;
        self.norm2.forward(&(&x + self.dropout.forward(&f, ctx)?)?)
    }
}

/// Post-norm layer in which rows of `x` attend to `memory`.
#[derive(Debug, Clone)]
pub struct CrossAttentionLayer {
    pub attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
    dropout: Dropout,
}

impl CrossAttentionLayer {
    pub fn new(p: &Params, cfg: AttnConfig) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&p.pp("attn"), cfg.dim, cfg.heads)?,
            norm1: LayerNorm::new(&p.pp("norm1"), cfg.dim)?,
            ffn: FeedForward::new(&p.pp("ffn"), cfg.dim, cfg.ffn_dim, cfg.dropout)?,
            norm2: LayerNorm::new(&p.pp("norm2"), cfg.dim)?,
            dropout: Dropout { p: cfg.dropout },
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        pos: Option<&Tensor>,
        memory: &Tensor,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let q = match pos {
            Some(pos) => (x + pos)?,
            None => x.clone(),
        };
        let a = self.attn.forward(&q, memory, memory)?;
        let x = self.norm1.forward(&(x + self.dropout.forward(&a, ctx)?)?)?;
        let f = self.ffn.forward(&x, ctx)?;
        self.norm2.forward(&(&x + self.dropout.forward(&f, ctx)?)?)
    }
}

/// Highest angular frequency of the positional encoding, in cycles per unit
/// of normalized position.
const POS_MAX_CYCLES: f64 = 64.0;

/// Sinusoidal encoding of normalized positions, `[L x dim]`. Channel pairs
/// `(2k, 2k+1)` hold `sin` and `cos` at geometrically spaced frequencies from
/// one cycle up to [`POS_MAX_CYCLES`] cycles over `[0, 1]`.
pub fn sinusoid_values(positions: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; positions.len() * dim];
    for (i, &p) in positions.iter().enumerate() {
        for k in 0..half {
            let expo = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            let w = std::f64::consts::TAU * POS_MAX_CYCLES.powf(expo);
            out[i * dim + 2 * k] = (p * w).sin();
            out[i * dim + 2 * k + 1] = (p * w).cos();
        }
    }
    out
}

pub fn sinusoid(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    from_f64(
        &sinusoid_values(positions, dim),
        &[positions.len(), dim],
        dtype,
        device,
    )
}

/// Encodes clip centers `(i + 0.5) / n`.
pub fn clip_positions(n: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let pos: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    sinusoid(&pos, dim, dtype, device)
}

/// Differentiable version of [`sinusoid`] for a `[L]` tensor of positions.
pub fn sinusoid_tensor(positions: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            let expo = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            std::f64::consts::TAU * POS_MAX_CYCLES.powf(expo)
        })
        .collect();
    let freqs = from_f64(&freqs, &[1, half], positions.dtype(), positions.device())?;
    let angles = positions.unsqueeze(1)?.broadcast_mul(&freqs)?;
    let l = positions.dim(0)?;
    // interleave sin/cos
    Tensor::stack(&[angles.sin()?, angles.cos()?], 2)?.reshape((l, dim))
}
