//! Query-conditioned video representation: project both modalities to the
//! hidden size, let clips attend to query tokens, then smooth with a
//! width-5 max-pool.

use candle_core::{Result, Tensor};

use crate::nn::layers::clip_positions;
use crate::nn::ops::shift_rows;
use crate::nn::{AttnConfig, CrossAttentionLayer, Ctx, Dropout, Init, LayerNorm, Linear, Params};

/// Affine map followed by layer norm and dropout.
#[derive(Debug, Clone)]
pub struct Projection {
    pub linear: Linear,
    pub norm: LayerNorm,
    dropout: Dropout,
}

impl Projection {
    pub fn new(p: &Params, input: usize, output: usize, dropout: f64) -> Result<Self> {
        Self::with_init(p, input, output, dropout, Init::XavierUniform, Init::Zeros)
    }

    pub fn with_init(
        p: &Params,
        input: usize,
        output: usize,
        dropout: f64,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::with_init(&p.pp("linear"), input, output, weight, Some(bias))?,
            norm: LayerNorm::new(&p.pp("norm"), output)?,
            dropout: Dropout { p: dropout },
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let y = self.norm.forward(&self.linear.forward(x)?)?;
        self.dropout.forward(&y, ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub layers: usize,
    pub attn: AttnConfig,
}

#[derive(Debug, Clone)]
pub struct FusionEncoder {
    pub video_proj: Projection,
    pub text_proj: Projection,
    pub layers: Vec<CrossAttentionLayer>,
    hidden: usize,
}

/// Half-width of the smoothing max-pool (kernel 5, stride 1, padding 2).
pub const MAXPOOL_RADIUS: isize = 2;

/// Sliding maximum over rows with window 5; out-of-range rows count as
/// `-inf`, so padding never wins.
pub fn smooth_maxpool(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for offset in (-MAXPOOL_RADIUS..=MAXPOOL_RADIUS).filter(|&o| o != 0) {
        out = out.maximum(&shift_rows(x, offset, f64::NEG_INFINITY)?)?;
    }
    Ok(out)
}

impl FusionEncoder {
    pub fn new(p: &Params, cfg: FusionConfig) -> Result<Self> {
        let d = cfg.attn.dim;
        let layers = (0..cfg.layers)
            .map(|i| CrossAttentionLayer::new(&p.pp(format!("cross{i}")), cfg.attn))
            .collect::<Result<_>>()?;
        Ok(Self {
            video_proj: Projection::new(&p.pp("video_proj"), cfg.video_dim, d, cfg.attn.dropout)?,
            text_proj: Projection::new(&p.pp("text_proj"), cfg.text_dim, d, cfg.attn.dropout)?,
            layers,
            hidden: d,
        })
    }

    pub fn project(&self, video: &Tensor, text: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, Tensor)> {
        Ok((
            self.video_proj.forward(video, ctx)?,
            self.text_proj.forward(text, ctx)?,
        ))
    }

    /// Stacked cross-attention with clips as queries and tokens as keys and
    /// values. Clip positions are encoded sinusoidally on the query side.
    pub fn cross_attend(&self, video: &Tensor, text: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let n = video.dim(0)?;
        let pos = clip_positions(n, self.hidden, video.dtype(), video.device())?;
        let mut x = video.clone();
        for layer in &self.layers {
            x = layer.forward(&x, Some(&pos), text, ctx)?;
        }
        Ok(x)
    }

    /// `Z` for already-projected inputs.
    pub fn fuse_projected(&self, video: &Tensor, text: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        smooth_maxpool(&self.cross_attend(video, text, ctx)?)
    }

    pub fn forward(&self, video: &Tensor, text: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let (v, t) = self.project(video, text, ctx)?;
        self.fuse_projected(&v, &t, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::to_f64_vec;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (v.len(), 1), &Device::Cpu).unwrap()
    }

    #[test]
    fn maxpool_hand_enumerated() {
        let y = to_f64_vec(&smooth_maxpool(&col(&[1., 3., 2., 5., 4.])).unwrap()).unwrap();
        assert_eq!(y, vec![3., 5., 5., 5., 5.]);
    }

    #[test]
    fn maxpool_constant_and_single_row() {
        let y = to_f64_vec(&smooth_maxpool(&col(&[-2.0; 6])).unwrap()).unwrap();
        assert_eq!(y, vec![-2.0; 6]);
        let y = to_f64_vec(&smooth_maxpool(&col(&[-7.5])).unwrap()).unwrap();
        assert_eq!(y, vec![-7.5]);
    }

    #[test]
    fn maxpool_negative_columns_ignore_padding() {
        let y = to_f64_vec(&smooth_maxpool(&col(&[-5., -4., -3.])).unwrap()).unwrap();
        assert_eq!(y, vec![-3., -3., -3.]);
    }

    fn store() -> ParamStore {
        ParamStore::new(DType::F64, 11)
    }

    #[test]
    fn identity_projection_keeps_normalized_rows() {
        let s = store();
        let proj = Projection::with_init(&s.root(), 4, 4, 0.1, Init::Identity, Init::Zeros).unwrap();
        let x = Tensor::from_slice(
            &[1.0f64, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0],
            (2, 4),
            &Device::Cpu,
        )
        .unwrap();
        let y = to_f64_vec(&proj.forward(&x, &mut Ctx::eval()).unwrap()).unwrap();
        for (a, b) in y.iter().zip(to_f64_vec(&x).unwrap()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_input_projects_to_normalized_bias() {
        let s = store();
        let proj = Projection::with_init(&s.root(), 3, 4, 0.0, Init::XavierUniform, Init::Uniform(1.0))
            .unwrap();
        let x = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let y = to_f64_vec(&proj.forward(&x, &mut Ctx::eval()).unwrap()).unwrap();
        let b = to_f64_vec(proj.linear.bias.as_ref().unwrap()).unwrap();
        let mean = b.iter().sum::<f64>() / 4.0;
        let var = b.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for row in 0..2 {
            for k in 0..4 {
                let want = (b[k] - mean) / (var + 1e-5).sqrt();
                assert!((y[row * 4 + k] - want).abs() < 1e-12);
            }
        }
    }

    fn encoder(s: &ParamStore, dv: usize, dt: usize, d: usize, layers: usize) -> FusionEncoder {
        FusionEncoder::new(
            &s.root(),
            FusionConfig {
                video_dim: dv,
                text_dim: dt,
                layers,
                attn: AttnConfig {
                    dim: d,
                    heads: 2,
                    ffn_dim: 2 * d,
                    dropout: 0.1,
                },
            },
        )
        .unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let v: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (r, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn output_has_hidden_width() {
        let s = store();
        let enc = encoder(&s, 10, 6, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = enc
            .forward(&randn(&mut rng, 7, 10), &randn(&mut rng, 3, 6), &mut Ctx::eval())
            .unwrap();
        assert_eq!(z.dims(), &[7, 8]);
    }

    #[test]
    fn identical_tokens_are_order_invariant() {
        let s = store();
        let enc = encoder(&s, 8, 8, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = randn(&mut rng, 5, 8);
        let tok = randn(&mut rng, 1, 8);
        let t1 = Tensor::cat(&[&tok, &tok, &tok], 0).unwrap();
        let t2 = t1.flip(&[0]).unwrap();
        let a = to_f64_vec(&enc.forward(&v, &t1, &mut Ctx::eval()).unwrap()).unwrap();
        let b = to_f64_vec(&enc.forward(&v, &t2, &mut Ctx::eval()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    // Plain-loop evaluation of one post-norm cross-attention layer.
    mod oracle {
        pub type M = Vec<Vec<f64>>;

        pub fn from(t: &candle_core::Tensor) -> M {
            t.to_vec2::<f64>().unwrap()
        }

        pub fn vec(t: &candle_core::Tensor) -> Vec<f64> {
            t.to_vec1::<f64>().unwrap()
        }

        pub fn affine(x: &M, w: &M, b: &[f64]) -> M {
            x.iter()
                .map(|row| {
                    (0..w[0].len())
                        .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>())
                        .collect()
                })
                .collect()
        }

        pub fn add(a: &M, b: &M) -> M {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
        }

        pub fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
            x.iter()
                .map(|row| {
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    row.iter()
                        .enumerate()
                        .map(|(k, v)| (v - mean) / (var + 1e-5).sqrt() * g[k] + b[k])
                        .collect()
                })
                .collect()
        }

        pub fn attention(q: &M, k: &M, v: &M, heads: usize) -> M {
            let d = q[0].len();
            let dh = d / heads;
            let mut out = vec![vec![0.0; d]; q.len()];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for (i, qi) in q.iter().enumerate() {
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kj| {
                            cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in cols.clone() {
                        out[i][c] = e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum();
                    }
                }
            }
            out
        }
    }

    #[test]
    fn cross_layer_matches_step_by_step_oracle() {
        use oracle::*;
        let s = ParamStore::new(DType::F64, 21);
        let enc = encoder(&s, 8, 8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let video = randn(&mut rng, 4, 8);
        let text = randn(&mut rng, 2, 8);
        let got = to_f64_vec(&enc.cross_attend(&video, &text, &mut Ctx::eval()).unwrap()).unwrap();

        let p = |name: &str| s.get(name).unwrap().as_tensor().clone();
        let w = |name: &str| from(&p(&format!("cross0.{name}.weight")));
        let b = |name: &str| vec(&p(&format!("cross0.{name}.bias")));
        let x = from(&video);
        let t = from(&text);
        let pos: M = crate::nn::layers::sinusoid_values(&[0.125, 0.375, 0.625, 0.875], 8)
            .chunks(8)
            .map(|c| c.to_vec())
            .collect();
        let q = affine(&add(&x, &pos), &w("attn.q"), &b("attn.q"));
        let k = affine(&t, &w("attn.k"), &b("attn.k"));
        let v = affine(&t, &w("attn.v"), &b("attn.v"));
        let a = affine(&attention(&q, &k, &v, 2), &w("attn.out"), &b("attn.out"));
        let g1 = vec(&p("cross0.norm1.gamma"));
        let b1 = vec(&p("cross0.norm1.beta"));
        let h = layer_norm(&add(&x, &a), &g1, &b1);
        let up: M = affine(&h, &w("ffn.up"), &b("ffn.up"))
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let f = affine(&up, &w("ffn.down"), &b("ffn.down"));
        let g2 = vec(&p("cross0.norm2.gamma"));
        let b2 = vec(&p("cross0.norm2.beta"));
        let want: Vec<f64> = layer_norm(&add(&h, &f), &g2, &b2).concat();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }
}
