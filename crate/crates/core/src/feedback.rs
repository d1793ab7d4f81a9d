//! Inter-task feedback: converting one head's output into a clip mask that
//! modulates the other head's input as `X + X * mask`.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::from_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Moment-to-mask: unit L2 norm or all zero.
    M2m,
    /// Highlightness-to-mask: binary.
    H2m,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidingMask {
    pub values: Vec<f64>,
    pub kind: MaskKind,
}

impl GuidingMask {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Clip `i` spans `[i * len, (i + 1) * len)` with `len = duration / n`; it is
/// covered by a moment when the two overlap with positive length.
pub fn covered_clips(start: f64, end: f64, duration: f64, n: usize) -> impl Iterator<Item = usize> {
    let len = duration / n as f64;
    (0..n).filter(move |&i| {
        let lo = (i as f64 * len).max(start);
        let hi = ((i + 1) as f64 * len).min(end);
        hi - lo > 0.0
    })
}

/// Sums one binary coverage vector per moment and L2-normalizes the result.
pub fn m2m_convert(moments: &[(f64, f64)], duration: f64, n: usize) -> GuidingMask {
    let mut counts = vec![0.0f64; n];
    for &(s, e) in moments {
        for i in covered_clips(s, e, duration, n) {
            counts[i] += 1.0;
        }
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        counts.iter_mut().for_each(|c| *c /= norm);
    }
    GuidingMask {
        values: counts,
        kind: MaskKind::M2m,
    }
}

/// Binarizes scores at their mean; values equal to the mean map to 1.
pub fn h2m_convert(scores: &[f64]) -> GuidingMask {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // rounding in the sum must not lift the mean above a constant vector
    let mean = (scores.iter().sum::<f64>() / scores.len().max(1) as f64).min(max);
    GuidingMask {
        values: scores
            .iter()
            .map(|&s| if s >= mean { 1.0 } else { 0.0 })
            .collect(),
        kind: MaskKind::H2m,
    }
}

/// `X + X * mask` with the mask broadcast over features. The mask enters as
/// a constant, so no gradient flows into whatever produced it.
pub fn apply_mask(x: &Tensor, mask: &GuidingMask) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    if mask.len() != n {
        return Err(Error::validation(format!(
            "mask of length {} applied to {n} clips",
            mask.len()
        )));
    }
    let m = from_f64(&mask.values, &[n, 1], x.dtype(), x.device())?;
    Ok((x + x.broadcast_mul(&m)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeedbackMode {
    None,
    Mr2Hd,
    Hd2Mr,
    Bi,
    MrThenHd,
    HdThenMr,
}

impl FeedbackMode {
    pub const ALL: [FeedbackMode; 6] = [
        FeedbackMode::None,
        FeedbackMode::Mr2Hd,
        FeedbackMode::Hd2Mr,
        FeedbackMode::Bi,
        FeedbackMode::MrThenHd,
        FeedbackMode::HdThenMr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackMode::None => "none",
            FeedbackMode::Mr2Hd => "mr2hd",
            FeedbackMode::Hd2Mr => "hd2mr",
            FeedbackMode::Bi => "bi",
            FeedbackMode::MrThenHd => "mr_then_hd",
            FeedbackMode::HdThenMr => "hd_then_mr",
        }
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        FeedbackMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown feedback mode {s:?}"))
    }
}

/// What a single forward pass does with masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    /// Both heads see their raw features.
    None,
    /// MR runs unmasked; its moments mask the HD input.
    Mr2Hd,
    /// HD runs unmasked; its scores mask the MR input.
    Hd2Mr,
    /// Unmasked preliminary pass of both heads, then a second pass with both
    /// masks applied.
    Bi,
}

/// Routing in effect at `epoch` of `max_epoch`. Feedback switches on at
/// `start_frac * max_epoch`; the sequential modes switch direction halfway
/// through the remaining epochs.
pub fn feedback_active(epoch: usize, max_epoch: usize, mode: FeedbackMode, start_frac: f64) -> Routing {
    let e = epoch as f64;
    let start = max_epoch as f64 * start_frac;
    if e < start {
        return Routing::None;
    }
    let switch = start + (max_epoch as f64 - start) / 2.0;
    match mode {
        FeedbackMode::None => Routing::None,
        FeedbackMode::Mr2Hd => Routing::Mr2Hd,
        FeedbackMode::Hd2Mr => Routing::Hd2Mr,
        FeedbackMode::Bi => Routing::Bi,
        FeedbackMode::MrThenHd if e < switch => Routing::Mr2Hd,
        FeedbackMode::MrThenHd => Routing::Hd2Mr,
        FeedbackMode::HdThenMr if e < switch => Routing::Hd2Mr,
        FeedbackMode::HdThenMr => Routing::Mr2Hd,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    #[test]
    fn m2m_overlapping_moments() {
        // 6 clips of 2 s; moments cover clips {0,1} and {1,2}
        let m = m2m_convert(&[(0.0, 4.0), (2.0, 6.0)], 12.0, 6);
        let s6 = 6f64.sqrt();
        assert_eq!(m.values, vec![1.0 / s6, 2.0 / s6, 1.0 / s6, 0.0, 0.0, 0.0]);
        assert_eq!(m.kind, MaskKind::M2m);
    }

    #[test]
    fn m2m_full_video_is_uniform() {
        let m = m2m_convert(&[(0.0, 150.0)], 150.0, 75);
        let want = 1.0 / 75f64.sqrt();
        assert!(m.values.iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn m2m_partial_overlap_counts() {
        let m = m2m_convert(&[(1.9, 2.1)], 12.0, 6);
        assert!(m.values[0] > 0.0 && m.values[1] > 0.0 && m.values[2] == 0.0);
        // touching a clip boundary is not coverage
        let m = m2m_convert(&[(2.0, 4.0)], 12.0, 6);
        assert_eq!(m.values, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn m2m_degenerate_moments_give_zero_mask() {
        let m = m2m_convert(&[(3.0, 3.0), (5.0, 5.0)], 12.0, 6);
        assert!(m.is_zero());
        assert!(m2m_convert(&[], 12.0, 6).is_zero());
    }

    #[test]
    fn h2m_rule() {
        assert_eq!(h2m_convert(&[1.0, 2.0, 3.0, 4.0]).values, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(h2m_convert(&[0.3; 5]).values, vec![1.0; 5]);
        assert_eq!(h2m_convert(&[-2.0]).values, vec![1.0]);
    }

    #[test]
    fn apply_mask_cases() {
        let x = Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let mask = |v: Vec<f64>| GuidingMask { values: v, kind: MaskKind::H2m };
        let y = apply_mask(&x, &mask(vec![1.0, 0.0])).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), vec![vec![2.0, 4.0], vec![3.0, 4.0]]);
        let y = apply_mask(&x, &mask(vec![0.0, 0.0])).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), x.to_vec2::<f64>().unwrap());
        let y = apply_mask(&x, &mask(vec![1.0, 1.0])).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), vec![vec![2.0, 4.0], vec![6.0, 8.0]]);
        assert!(matches!(
            apply_mask(&x, &mask(vec![1.0])),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn schedule_examples() {
        for mode in FeedbackMode::ALL {
            assert_eq!(feedback_active(49, 200, mode, 0.5), Routing::None);
            assert_eq!(feedback_active(99, 200, mode, 0.5), Routing::None);
        }
        assert_eq!(feedback_active(100, 200, FeedbackMode::Mr2Hd, 0.5), Routing::Mr2Hd);
        assert_eq!(feedback_active(160, 200, FeedbackMode::MrThenHd, 0.5), Routing::Hd2Mr);
        assert_eq!(feedback_active(149, 200, FeedbackMode::MrThenHd, 0.5), Routing::Mr2Hd);
        assert_eq!(feedback_active(149, 200, FeedbackMode::HdThenMr, 0.5), Routing::Hd2Mr);
        assert_eq!(feedback_active(150, 200, FeedbackMode::HdThenMr, 0.5), Routing::Mr2Hd);
        assert_eq!(feedback_active(120, 200, FeedbackMode::Bi, 0.5), Routing::Bi);
        assert_eq!(feedback_active(199, 200, FeedbackMode::None, 0.5), Routing::None);
        assert_eq!(feedback_active(4, 10, FeedbackMode::Mr2Hd, 0.5), Routing::None);
        assert_eq!(feedback_active(5, 10, FeedbackMode::Mr2Hd, 0.5), Routing::Mr2Hd);
    }

    #[test]
    fn modes_parse() {
        for m in FeedbackMode::ALL {
            assert_eq!(m.as_str().parse::<FeedbackMode>().unwrap(), m);
        }
    }

    proptest! {
        #[test]
        fn m2m_is_unit_or_zero(
            n in 1usize..40,
            moments in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..10),
        ) {
            let duration = 2.0 * n as f64;
            let ms: Vec<(f64, f64)> = moments
                .iter()
                .map(|&(a, b)| (a.min(b) * duration, a.max(b) * duration))
                .collect();
            let m = m2m_convert(&ms, duration, n);
            let norm: f64 = m.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(m.is_zero() || (norm - 1.0).abs() < 1e-12);
            prop_assert!(m.values.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn h2m_is_idempotent(scores in prop::collection::vec(-5.0f64..5.0, 1..50)) {
            let once = h2m_convert(&scores);
            let twice = h2m_convert(&once.values);
            prop_assert!(once.values.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(once.values, twice.values);
        }
    }
}
