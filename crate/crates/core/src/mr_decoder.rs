//! Moment decoder with dynamic anchor queries.
//!
//! Each of the `N_q` queries carries a reference moment `(center, width)`.
//! Every layer encodes the reference sinusoidally into a positional query,
//! attends over the clip features, and predicts a residual `(dc, dw)` in
//! logit space: `ref' = sigmoid(logit(ref) + delta)`. Refined references are
//! detached before feeding the next layer.

use candle_core::{Result as TensorResult, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::feedback::{apply_mask, GuidingMask};
use crate::nn::layers::{clip_positions, sinusoid_tensor};
use crate::nn::ops::{from_f64, sigmoid, to_f64_vec};
use crate::nn::{
    AttnConfig, Ctx, Dropout, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, Params,
};

const ANCHOR_EPS: f64 = 1e-6;

/// Normalized reference moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorQuery {
    pub center: f64,
    pub width: f64,
}

impl AnchorQuery {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&center) {
            return Err(Error::validation(format!("anchor center {center} outside [0, 1]")));
        }
        if !(width > 0.0 && width <= 1.0) {
            return Err(Error::validation(format!("anchor width {width} outside (0, 1]")));
        }
        Ok(Self { center, width })
    }

    /// Centers at `(i + 0.5) / n`, width 0.1.
    pub fn grid(n: usize) -> Vec<AnchorQuery> {
        (0..n)
            .map(|i| AnchorQuery {
                center: (i as f64 + 0.5) / n as f64,
                width: 0.1,
            })
            .collect()
    }
}

/// Output of one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    /// `[N_q x 2]` normalized `(center, width)`.
    pub moments: Tensor,
    /// `[N_q]` foreground logits.
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct MomentPredictions {
    /// One entry per decoder layer; the last is the final prediction.
    pub layers: Vec<LayerOutput>,
}

impl MomentPredictions {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("decoder has at least one layer")
    }

    pub fn moments(&self) -> &Tensor {
        &self.last().moments
    }

    pub fn logits(&self) -> &Tensor {
        &self.last().logits
    }

    /// Intermediate layers used for deep supervision.
    pub fn aux(&self) -> &[LayerOutput] {
        &self.layers[..self.layers.len() - 1]
    }

    /// Final `(center, width)` pairs and foreground confidences.
    pub fn to_host(&self) -> TensorResult<(Vec<(f64, f64)>, Vec<f64>)> {
        let m = to_f64_vec(self.moments())?;
        let logits = to_f64_vec(self.logits())?;
        let moments = m.chunks(2).map(|c| (c[0], c[1])).collect();
        let conf = logits.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
        Ok((moments, conf))
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
    dropout: Dropout,
}

impl DecoderLayer {
    fn new(p: &Params, cfg: AttnConfig) -> TensorResult<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(&p.pp("self_attn"), cfg.dim, cfg.heads)?,
            norm1: LayerNorm::new(&p.pp("norm1"), cfg.dim)?,
            cross_attn: MultiHeadAttention::new(&p.pp("cross_attn"), cfg.dim, cfg.heads)?,
            norm2: LayerNorm::new(&p.pp("norm2"), cfg.dim)?,
            ffn: FeedForward::new(&p.pp("ffn"), cfg.dim, cfg.ffn_dim, cfg.dropout)?,
            norm3: LayerNorm::new(&p.pp("norm3"), cfg.dim)?,
            dropout: Dropout { p: cfg.dropout },
        })
    }

    fn forward(
        &self,
        tgt: &Tensor,
        query_pos: &Tensor,
        key: &Tensor,
        value: &Tensor,
        ctx: &mut Ctx,
    ) -> TensorResult<Tensor> {
        let q = (tgt + query_pos)?;
        let sa = self.self_attn.forward(&q, &q, tgt)?;
        let tgt = self.norm1.forward(&(tgt + self.dropout.forward(&sa, ctx)?)?)?;
        let q = (&tgt + query_pos)?;
        let ca = self.cross_attn.forward(&q, key, value)?;
        let tgt = self.norm2.forward(&(&tgt + self.dropout.forward(&ca, ctx)?)?)?;
        let f = self.ffn.forward(&tgt, ctx)?;
        self.norm3.forward(&(&tgt + self.dropout.forward(&f, ctx)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrDecoderConfig {
    pub num_queries: usize,
    pub layers: usize,
    pub attn: AttnConfig,
}

#[derive(Debug, Clone)]
pub struct MrDecoder {
    /// `[N_q x 2]` logits of the initial anchors.
    pub anchor_logits: Tensor,
    anchor_var: Var,
    ref_head: Mlp,
    layers: Vec<DecoderLayer>,
    refine_head: Mlp,
    pub class_head: Linear,
    dim: usize,
}

impl MrDecoder {
    pub fn new(p: &Params, cfg: MrDecoderConfig) -> TensorResult<Self> {
        if cfg.layers == 0 || cfg.num_queries == 0 {
            candle_core::bail!("moment decoder needs at least one layer and one query");
        }
        let d = cfg.attn.dim;
        let grid: Vec<f64> = AnchorQuery::grid(cfg.num_queries)
            .iter()
            .flat_map(|a| [logit(a.center), logit(a.width)])
            .collect();
        let anchor_logits = p.get((cfg.num_queries, 2), "anchor_logits", Init::Zeros)?;
        let anchor_var = p.var("anchor_logits").expect("just created");
        set_host(&anchor_var, &grid)?;
        Ok(Self {
            anchor_logits,
            anchor_var,
            ref_head: Mlp {
                hidden: Linear::new(&p.pp("ref_head.hidden"), 2 * d, d)?,
                out: Linear::new(&p.pp("ref_head.out"), d, d)?,
            },
            layers: (0..cfg.layers)
                .map(|i| DecoderLayer::new(&p.pp(format!("layer{i}")), cfg.attn))
                .collect::<TensorResult<_>>()?,
            refine_head: Mlp {
                hidden: Linear::new(&p.pp("refine_head.hidden"), d, d)?,
                out: Linear::with_init(&p.pp("refine_head.out"), d, 2, Init::Zeros, Some(Init::Zeros))?,
            },
            class_head: Linear::new(&p.pp("class_head"), d, 1)?,
            dim: d,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.anchor_logits.dim(0).unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Current anchors as `(center, width)` tensor.
    pub fn anchor_moments(&self) -> TensorResult<Tensor> {
        sigmoid(&self.anchor_logits)
    }

    pub fn anchors(&self) -> TensorResult<Vec<AnchorQuery>> {
        let v = to_f64_vec(&self.anchor_moments()?)?;
        Ok(v.chunks(2)
            .map(|c| AnchorQuery {
                center: c[0],
                width: c[1],
            })
            .collect())
    }

    /// Replaces the anchors. Values must satisfy the anchor bounds and their
    /// count must equal the number of queries.
    pub fn set_anchors(&self, anchors: &[AnchorQuery]) -> Result<()> {
        if anchors.len() != self.num_queries() {
            return Err(Error::validation(format!(
                "{} anchors for {} queries",
                anchors.len(),
                self.num_queries()
            )));
        }
        let mut flat = Vec::with_capacity(2 * anchors.len());
        for a in anchors {
            AnchorQuery::new(a.center, a.width)?;
            flat.extend([logit(a.center), logit(a.width)]);
        }
        set_host(&self.anchor_var, &flat)?;
        Ok(())
    }

    fn query_pos(&self, reference: &Tensor) -> TensorResult<Tensor> {
        let c = sinusoid_tensor(&reference.narrow(1, 0, 1)?.squeeze(1)?, self.dim)?;
        let w = sinusoid_tensor(&reference.narrow(1, 1, 1)?.squeeze(1)?, self.dim)?;
        self.ref_head.forward(&Tensor::cat(&[c, w], 1)?)
    }

    /// Decodes moments from `x_mr` (`[N x D]`). When `mask` is given the
    /// decoder sees `x_mr + x_mr * mask`.
    pub fn decode(&self, x_mr: &Tensor, mask: Option<&GuidingMask>, ctx: &mut Ctx) -> Result<MomentPredictions> {
        let memory = match mask {
            Some(m) => apply_mask(x_mr, m)?,
            None => x_mr.clone(),
        };
        let (n, _) = memory.dims2()?;
        let pos = clip_positions(n, self.dim, memory.dtype(), memory.device())?;
        let keyed = (&memory + &pos)?;

        let nq = self.num_queries();
        let mut tgt = Tensor::zeros((nq, self.dim), memory.dtype(), memory.device())?;
        let mut ref_logits = self.anchor_logits.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let reference = sigmoid(&ref_logits)?;
            let query_pos = self.query_pos(&reference)?;
            tgt = layer.forward(&tgt, &query_pos, &keyed, &keyed, ctx)?;
            let delta = self.refine_head.forward(&tgt)?;
            let refined = (&ref_logits + delta)?;
            layers.push(LayerOutput {
                moments: sigmoid(&refined)?,
                logits: self.class_head.forward(&tgt)?.squeeze(D::Minus1)?,
            });
            ref_logits = refined.detach();
        }
        Ok(MomentPredictions { layers })
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(ANCHOR_EPS, 1.0 - ANCHOR_EPS);
    (p / (1.0 - p)).ln()
}

fn set_host(var: &Var, values: &[f64]) -> TensorResult<()> {
    var.set(&from_f64(values, var.dims(), var.dtype(), var.device())?)
}

/// `(center, width)` to clamped `(start, end)` seconds.
pub fn moments_to_seconds(moments: &[(f64, f64)], duration: f64) -> Vec<(f64, f64)> {
    moments
        .iter()
        .map(|&(c, w)| {
            let start = ((c - w / 2.0) * duration).clamp(0.0, duration);
            let end = ((c + w / 2.0) * duration).clamp(0.0, duration);
            (start, end.max(start))
        })
        .collect()
}

/// Inverse of [`moments_to_seconds`] for in-range windows.
pub fn seconds_to_moment(start: f64, end: f64, duration: f64) -> (f64, f64) {
    ((start + end) / (2.0 * duration), (end - start) / duration)
}

/// Logit-space refinement applied to a single reference, for reference.
pub fn refine_reference(reference: f64, delta: f64) -> f64 {
    let l = logit(reference);
    1.0 / (1.0 + (-(l + delta)).exp())
}
