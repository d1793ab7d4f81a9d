//! Differentiable building blocks composed from primitive tensor ops, so that
//! every one of them has a backward pass at both `f32` and `f64`.

use candle_core::{DType, Device, Result, Tensor, D};

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// `log(p / (1 - p))` with `p` clamped away from 0 and 1.
pub fn inverse_sigmoid(p: &Tensor, eps: f64) -> Result<Tensor> {
    let p = p.clamp(eps, 1.0 - eps)?;
    let q = p.affine(-1.0, 1.0)?;
    p.log()? - q.log()?
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    x.relu()? + tail
}

/// Elementwise binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // max(x, 0) - x * y + log(1 + exp(-|x|))
    let tail = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    (logits.relu()? - logits.mul(targets)?)? + tail
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// `log(sum(exp(x)))` over the last dimension.
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    (s + max)?.squeeze(D::Minus1)
}

/// Tensor from `f64` values in the requested dtype.
pub fn from_f64(values: &[f64], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Tensor::from_slice(values, shape, device)?.to_dtype(dtype)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

pub fn to_f64_scalar(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

/// Rows of `x` shifted by `offset` with `fill` entering at the boundary:
/// `out[i] = x[i + offset]` when in range.
pub fn shift_rows(x: &Tensor, offset: isize, fill: f64) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let k = offset.unsigned_abs().min(n);
    if k == 0 {
        return Ok(x.clone());
    }
    let pad = (Tensor::ones((k, d), x.dtype(), x.device())? * fill)?;
    if k == n {
        return Ok(pad);
    }
    if offset > 0 {
        Tensor::cat(&[&x.narrow(0, k, n - k)?, &pad], 0)
    } else {
        Tensor::cat(&[&pad, &x.narrow(0, 0, n - k)?], 0)
    }
}

/// Stacks `[x[i-r], ..., x[i+r]]` along the feature axis with zero padding:
/// `[N x D]` becomes `[N x (2r+1) D]`.
pub fn unfold_rows(x: &Tensor, radius: usize) -> Result<Tensor> {
    let r = radius as isize;
    let parts = (-r..=r)
        .map(|o| shift_rows(x, o, 0.0))
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat(&parts, 1)
}
