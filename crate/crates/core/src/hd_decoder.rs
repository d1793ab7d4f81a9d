//! Lightweight saliency head: an alternating Linear / Conv1d stack plus the
//! scaled row-sum of its input.
//!
//! ```text
//! Y[i] = D_HD(J)[i] + sum_k J[i, k] / sqrt(d)
//! D_HD = affine(d -> d) -> ReLU -> conv1d(k=3, p=1, d -> h) -> ReLU -> affine(h -> 1)
//! ```

use candle_core::{Result as TensorResult, Tensor, D};

use crate::error::{Error, Result};
use crate::feedback::{apply_mask, GuidingMask};
use crate::nn::ops::unfold_rows;
use crate::nn::{Linear, Params};

#[derive(Debug, Clone)]
pub struct HdDecoder {
    pub input: Linear,
    /// `[3d x h]`: rows `[0, d)` see clip `i - 1`, `[d, 2d)` clip `i`,
    /// `[2d, 3d)` clip `i + 1`.
    pub conv: Linear,
    pub output: Linear,
    dim: usize,
}

pub const CONV_KERNEL: usize = 3;

impl HdDecoder {
    pub fn new(p: &Params, dim: usize, hidden_ratio: f64) -> TensorResult<Self> {
        let hidden = ((dim as f64 * hidden_ratio).round() as usize).max(1);
        Ok(Self {
            input: Linear::new(&p.pp("input"), dim, dim)?,
            conv: Linear::new(&p.pp("conv"), CONV_KERNEL * dim, hidden)?,
            output: Linear::new(&p.pp("output"), hidden, 1)?,
            dim,
        })
    }

    pub fn hidden(&self) -> usize {
        self.conv.out_dim()
    }

    /// The learned stack alone, `[N]`.
    pub fn stack(&self, j: &Tensor) -> TensorResult<Tensor> {
        let h = self.input.forward(j)?.relu()?;
        let h = self.conv.forward(&unfold_rows(&h, CONV_KERNEL / 2)?)?.relu()?;
        self.output.forward(&h)?.squeeze(D::Minus1)
    }

    /// Row sums scaled by `1 / sqrt(d)`, `[N]`.
    pub fn residual(&self, j: &Tensor) -> TensorResult<Tensor> {
        j.sum(D::Minus1)? / (self.dim as f64).sqrt()
    }

    /// Saliency scores `[N]` for decoder input `j` (`[N x d]`), optionally
    /// modulated by a guiding mask first.
    pub fn decode(&self, j: &Tensor, mask: Option<&GuidingMask>) -> Result<Tensor> {
        let (n, d) = j.dims2()?;
        if n == 0 {
            return Err(Error::validation("saliency decoder called with zero clips"));
        }
        if d != self.dim {
            return Err(Error::validation(format!(
                "decoder expects width {}, got {d}",
                self.dim
            )));
        }
        let j = match mask {
            Some(m) => apply_mask(j, m)?,
            None => j.clone(),
        };
        Ok((self.stack(&j)? + self.residual(&j)?)?)
    }
}
