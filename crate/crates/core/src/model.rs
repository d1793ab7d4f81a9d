//! The assembled network: fusion, task decoupling, both decoders and the
//! feedback routing between them.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoupled::{DecoupledConfig, ExpertKind, TaskDecoupledUnit, TaskFeatures};
use crate::error::Result;
use crate::feature_store::FeatureMatrix;
use crate::feedback::{h2m_convert, m2m_convert, GuidingMask, Routing};
use crate::fusion::{FusionConfig, FusionEncoder};
use crate::hd_decoder::HdDecoder;
use crate::mr_decoder::{moments_to_seconds, MomentPredictions, MrDecoder, MrDecoderConfig};
use crate::nn::ops::to_f64_vec;
use crate::nn::{AttnConfig, Ctx, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub fusion_layers: usize,
    pub mr_expert: ExpertKind,
    pub hd_expert: ExpertKind,
    pub shared_layers: usize,
    pub num_queries: usize,
    pub mr_layers: usize,
    pub hd_hidden_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_dim: 64,
            text_dim: 64,
            hidden_dim: 64,
            heads: 8,
            ffn_dim: 128,
            dropout: 0.1,
            fusion_layers: 2,
            mr_expert: ExpertKind::Cnn,
            hd_expert: ExpertKind::Identity,
            shared_layers: 2,
            num_queries: 10,
            mr_layers: 2,
            hd_hidden_ratio: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn attn(&self) -> AttnConfig {
        AttnConfig {
            dim: self.hidden_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
        }
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub moments: MomentPredictions,
    /// `[N]` raw saliency scores.
    pub saliency: Tensor,
    /// Mask applied to the moment decoder input, if any.
    pub mr_mask: Option<GuidingMask>,
    /// Mask applied to the saliency decoder input, if any.
    pub hd_mask: Option<GuidingMask>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub fusion: FusionEncoder,
    pub unit: TaskDecoupledUnit,
    pub mr: MrDecoder,
    pub hd: HdDecoder,
    pub config: ModelConfig,
}

/// Host feature matrix as a tensor of the given dtype.
pub fn feature_tensor(m: &FeatureMatrix, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(&m.data, (m.rows, m.cols), device)?.to_dtype(dtype)?)
}

impl Model {
    pub fn new(p: &Params, config: ModelConfig) -> Result<Self> {
        if config.hidden_dim % config.heads != 0 {
            return Err(crate::Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                config.hidden_dim, config.heads
            )));
        }
        let attn = config.attn();
        Ok(Self {
            fusion: FusionEncoder::new(
                &p.pp("fusion"),
                FusionConfig {
                    video_dim: config.video_dim,
                    text_dim: config.text_dim,
                    layers: config.fusion_layers,
                    attn,
                },
            )?,
            unit: TaskDecoupledUnit::new(
                &p.pp("unit"),
                DecoupledConfig {
                    mr_expert: config.mr_expert,
                    hd_expert: config.hd_expert,
                    shared_layers: config.shared_layers,
                    attn,
                },
            )?,
            mr: MrDecoder::new(
                &p.pp("mr"),
                MrDecoderConfig {
                    num_queries: config.num_queries,
                    layers: config.mr_layers,
                    attn,
                },
            )?,
            hd: HdDecoder::new(&p.pp("hd"), config.hidden_dim, config.hd_hidden_ratio)?,
            config,
        })
    }

    /// Task features for one video-query pair.
    pub fn encode(&self, video: &Tensor, text: &Tensor, ctx: &mut Ctx) -> Result<TaskFeatures> {
        let z = self.fusion.forward(video, text, ctx)?;
        Ok(self.unit.decouple(&z, ctx)?)
    }

    fn moment_mask(&self, moments: &MomentPredictions, duration: f64, n: usize) -> Result<GuidingMask> {
        let (normalized, _) = moments.to_host()?;
        Ok(m2m_convert(&moments_to_seconds(&normalized, duration), duration, n))
    }

    fn saliency_mask(scores: &Tensor) -> Result<GuidingMask> {
        Ok(h2m_convert(&to_f64_vec(scores)?))
    }

    /// Full forward pass under the given routing. `duration` is the video
    /// length in seconds.
    pub fn forward(
        &self,
        video: &Tensor,
        text: &Tensor,
        duration: f64,
        routing: Routing,
        ctx: &mut Ctx,
    ) -> Result<ModelOutput> {
        let x = self.encode(video, text, ctx)?;
        let n = x.mr.dim(0)?;
        Ok(match routing {
            Routing::None => ModelOutput {
                moments: self.mr.decode(&x.mr, None, ctx)?,
                saliency: self.hd.decode(&x.hd, None)?,
                mr_mask: None,
                hd_mask: None,
            },
            Routing::Mr2Hd => {
                let moments = self.mr.decode(&x.mr, None, ctx)?;
                let mask = self.moment_mask(&moments, duration, n)?;
                ModelOutput {
                    saliency: self.hd.decode(&x.hd, Some(&mask))?,
                    moments,
                    mr_mask: None,
                    hd_mask: Some(mask),
                }
            }
            Routing::Hd2Mr => {
                let saliency = self.hd.decode(&x.hd, None)?;
                let mask = Self::saliency_mask(&saliency)?;
                ModelOutput {
                    moments: self.mr.decode(&x.mr, Some(&mask), ctx)?,
                    saliency,
                    mr_mask: Some(mask),
                    hd_mask: None,
                }
            }
            Routing::Bi => {
                let first_moments = self.mr.decode(&x.mr, None, ctx)?;
                let first_saliency = self.hd.decode(&x.hd, None)?;
                let hd_mask = self.moment_mask(&first_moments, duration, n)?;
                let mr_mask = Self::saliency_mask(&first_saliency)?;
                ModelOutput {
                    moments: self.mr.decode(&x.mr, Some(&mr_mask), ctx)?,
                    saliency: self.hd.decode(&x.hd, Some(&hd_mask))?,
                    mr_mask: Some(mr_mask),
                    hd_mask: Some(hd_mask),
                }
            }
        })
    }

    /// Forward pass of the network with no feedback path at all.
    pub fn forward_plain(&self, video: &Tensor, text: &Tensor, ctx: &mut Ctx) -> Result<(MomentPredictions, Tensor)> {
        let x = self.encode(video, text, ctx)?;
        Ok((self.mr.decode(&x.mr, None, ctx)?, self.hd.decode(&x.hd, None)?))
    }

    /// Unmasked saliency scores, used for mismatched video-query pairs.
    pub fn saliency(&self, video: &Tensor, text: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let x = self.encode(video, text, ctx)?;
        self.hd.decode(&x.hd, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn tiny() -> ModelConfig {
        ModelConfig {
            video_dim: 6,
            text_dim: 5,
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.1,
            num_queries: 4,
            ..ModelConfig::default()
        }
    }

    fn inputs(n: usize) -> (Tensor, Tensor) {
        let v: Vec<f64> = (0..n * 6).map(|i| ((i * 37) % 17) as f64 / 8.0 - 1.0).collect();
        let t: Vec<f64> = (0..3 * 5).map(|i| ((i * 11) % 7) as f64 / 3.0 - 1.0).collect();
        (
            Tensor::from_vec(v, (n, 6), &Device::Cpu).unwrap(),
            Tensor::from_vec(t, (3, 5), &Device::Cpu).unwrap(),
        )
    }

    fn flat(out: &ModelOutput) -> Vec<f64> {
        let mut v = to_f64_vec(out.moments.moments()).unwrap();
        v.extend(to_f64_vec(out.moments.logits()).unwrap());
        v.extend(to_f64_vec(&out.saliency).unwrap());
        v
    }

    #[test]
    fn shapes_and_masks_per_routing() {
        let s = ParamStore::new(DType::F64, 0);
        let m = Model::new(&s.root(), tiny()).unwrap();
        let (v, t) = inputs(12);
        for routing in [Routing::None, Routing::Mr2Hd, Routing::Hd2Mr, Routing::Bi] {
            let out = m.forward(&v, &t, 24.0, routing, &mut Ctx::eval()).unwrap();
            assert_eq!(out.moments.moments().dims(), &[4, 2]);
            assert_eq!(out.saliency.dims(), &[12]);
            assert_eq!(out.hd_mask.is_some(), matches!(routing, Routing::Mr2Hd | Routing::Bi));
            assert_eq!(out.mr_mask.is_some(), matches!(routing, Routing::Hd2Mr | Routing::Bi));
        }
    }

    #[test]
    fn no_routing_equals_the_plain_network() {
        let s = ParamStore::new(DType::F64, 1);
        let m = Model::new(&s.root(), tiny()).unwrap();
        let (v, t) = inputs(10);
        let out = m.forward(&v, &t, 20.0, Routing::None, &mut Ctx::train(5)).unwrap();
        let (moments, saliency) = m.forward_plain(&v, &t, &mut Ctx::train(5)).unwrap();
        let plain = ModelOutput {
            moments,
            saliency,
            mr_mask: None,
            hd_mask: None,
        };
        assert_eq!(flat(&out), flat(&plain));
    }

    #[test]
    fn feedback_changes_outputs() {
        let s = ParamStore::new(DType::F64, 2);
        let m = Model::new(&s.root(), tiny()).unwrap();
        let (v, t) = inputs(10);
        let none = m.forward(&v, &t, 20.0, Routing::None, &mut Ctx::eval()).unwrap();
        let fb = m.forward(&v, &t, 20.0, Routing::Mr2Hd, &mut Ctx::eval()).unwrap();
        assert_eq!(
            to_f64_vec(none.moments.moments()).unwrap(),
            to_f64_vec(fb.moments.moments()).unwrap()
        );
        assert_ne!(to_f64_vec(&none.saliency).unwrap(), to_f64_vec(&fb.saliency).unwrap());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let s = ParamStore::new(DType::F64, 0);
        let cfg = ModelConfig { heads: 3, ..tiny() };
        assert!(Model::new(&s.root(), cfg).is_err());
    }
}
