//! Task-decoupled unit: per-task mappers feeding a task-specific expert and a
//! shared expert whose outputs are multiplied elementwise.
//!
//! ```text
//! X_mr = P_mr(M_mr(Z)) * S(M_mr(Z))
//! X_hd = P_hd(M_hd(Z)) * S(M_hd(Z))
//! ```
//!
//! `S` is one set of parameters evaluated once per task.

use std::fmt;
use std::str::FromStr;

use candle_core::{Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::layers::clip_positions;
use crate::nn::ops::shift_rows;
use crate::nn::{AttnConfig, Ctx, Init, Linear, Params, SelfAttentionLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Mr,
    Hd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Identity,
    Linear,
    Cnn,
    Transformer,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Identity,
        ExpertKind::Linear,
        ExpertKind::Cnn,
        ExpertKind::Transformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Identity => "identity",
            ExpertKind::Linear => "linear",
            ExpertKind::Cnn => "cnn",
            ExpertKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpertKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "identity" | "iden" => Ok(ExpertKind::Identity),
            "linear" | "line" => Ok(ExpertKind::Linear),
            "cnn" => Ok(ExpertKind::Cnn),
            "transformer" | "trans" => Ok(ExpertKind::Transformer),
            other => Err(format!("unknown expert kind {other:?}")),
        }
    }
}

/// Depthwise conv (kernel 5, stride 1, zero padding 2) followed by a
/// pointwise conv.
#[derive(Debug, Clone)]
pub struct CnnExpert {
    /// `[5 x D]`, tap `k` multiplies row `i + k - 2`.
    pub depthwise: Tensor,
    pub depthwise_bias: Tensor,
    pub pointwise: Linear,
}

pub const CNN_KERNEL: usize = 5;

impl CnnExpert {
    fn new(p: &Params, dim: usize) -> Result<Self> {
        let bound = 1.0 / (CNN_KERNEL as f64).sqrt();
        Ok(Self {
            depthwise: p.get((CNN_KERNEL, dim), "depthwise", Init::Uniform(bound))?,
            depthwise_bias: p.get(dim, "depthwise_bias", Init::Zeros)?,
            pointwise: Linear::new(&p.pp("pointwise"), dim, dim)?,
        })
    }

    pub fn depthwise_conv(&self, x: &Tensor) -> Result<Tensor> {
        let radius = (CNN_KERNEL / 2) as isize;
        let mut acc: Option<Tensor> = None;
        for k in 0..CNN_KERNEL {
            let tap = self.depthwise.narrow(0, k, 1)?;
            let term = shift_rows(x, k as isize - radius, 0.0)?.broadcast_mul(&tap)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        acc.unwrap().broadcast_add(&self.depthwise_bias)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise_conv(x)?)
    }
}

#[derive(Debug, Clone)]
pub enum Expert {
    Identity,
    /// One affine layer with ReLU.
    Linear(Linear),
    Cnn(CnnExpert),
    Transformer(SelfAttentionLayer),
}

impl Expert {
    pub fn new(p: &Params, kind: ExpertKind, attn: AttnConfig) -> Result<Self> {
        Ok(match kind {
            ExpertKind::Identity => Expert::Identity,
            ExpertKind::Linear => Expert::Linear(Linear::new(&p.pp("linear"), attn.dim, attn.dim)?),
            ExpertKind::Cnn => Expert::Cnn(CnnExpert::new(&p.pp("cnn"), attn.dim)?),
            ExpertKind::Transformer => {
                Expert::Transformer(SelfAttentionLayer::new(&p.pp("transformer"), attn)?)
            }
        })
    }

    pub fn kind(&self) -> ExpertKind {
        match self {
            Expert::Identity => ExpertKind::Identity,
            Expert::Linear(_) => ExpertKind::Linear,
            Expert::Cnn(_) => ExpertKind::Cnn,
            Expert::Transformer(_) => ExpertKind::Transformer,
        }
    }

    pub fn forward(&self, x: &Tensor, pos: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        match self {
            Expert::Identity => Ok(x.clone()),
            Expert::Linear(l) => l.forward(x)?.relu(),
            Expert::Cnn(c) => c.forward(x),
            Expert::Transformer(t) => t.forward(x, Some(pos), ctx),
        }
    }
}

/// Stack of self-attention layers shared by both tasks.
#[derive(Debug, Clone)]
pub struct SharedExpert {
    pub layers: Vec<SelfAttentionLayer>,
}

impl SharedExpert {
    pub fn new(p: &Params, layers: usize, attn: AttnConfig) -> Result<Self> {
        Ok(Self {
            layers: (0..layers)
                .map(|i| SelfAttentionLayer::new(&p.pp(format!("layer{i}")), attn))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, x: &Tensor, pos: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.layers {
            x = layer.forward(&x, Some(pos), ctx)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoupledConfig {
    pub mr_expert: ExpertKind,
    pub hd_expert: ExpertKind,
    pub shared_layers: usize,
    pub attn: AttnConfig,
}

/// `X_mr` and `X_hd`, both `[N x D]`.
#[derive(Debug, Clone)]
pub struct TaskFeatures {
    pub mr: Tensor,
    pub hd: Tensor,
}

#[derive(Debug, Clone)]
pub struct TaskDecoupledUnit {
    pub mr_mapper: Linear,
    pub hd_mapper: Linear,
    pub mr_expert: Expert,
    pub hd_expert: Expert,
    pub shared: SharedExpert,
    dim: usize,
}

impl TaskDecoupledUnit {
    pub fn new(p: &Params, cfg: DecoupledConfig) -> Result<Self> {
        let d = cfg.attn.dim;
        Ok(Self {
            mr_mapper: Linear::new(&p.pp("mr_mapper"), d, d)?,
            hd_mapper: Linear::new(&p.pp("hd_mapper"), d, d)?,
            mr_expert: Expert::new(&p.pp("mr_expert"), cfg.mr_expert, cfg.attn)?,
            hd_expert: Expert::new(&p.pp("hd_expert"), cfg.hd_expert, cfg.attn)?,
            shared: SharedExpert::new(&p.pp("shared"), cfg.shared_layers, cfg.attn)?,
            dim: d,
        })
    }

    pub fn map_task(&self, z: &Tensor, task: Task) -> Result<Tensor> {
        match task {
            Task::Mr => self.mr_mapper.forward(z),
            Task::Hd => self.hd_mapper.forward(z),
        }
    }

    /// Features for a single task.
    pub fn task_feature(&self, z: &Tensor, task: Task, ctx: &mut Ctx) -> Result<Tensor> {
        let pos = clip_positions(z.dim(0)?, self.dim, z.dtype(), z.device())?;
        let mapped = self.map_task(z, task)?;
        let expert = match task {
            Task::Mr => &self.mr_expert,
            Task::Hd => &self.hd_expert,
        };
        let specific = expert.forward(&mapped, &pos, ctx)?;
        let common = self.shared.forward(&mapped, &pos, ctx)?;
        specific.mul(&common)
    }

    pub fn decouple(&self, z: &Tensor, ctx: &mut Ctx) -> Result<TaskFeatures> {
        Ok(TaskFeatures {
            mr: self.task_feature(z, Task::Mr, ctx)?,
            hd: self.task_feature(z, Task::Hd, ctx)?,
        })
    }
}
