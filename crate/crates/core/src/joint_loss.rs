//! Set-prediction loss for moments, ranking losses for saliency, and the
//! task-level combination.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{Result as TensorResult, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mr_decoder::{LayerOutput, MomentPredictions};
use crate::nn::ops::{bce_with_logits, from_f64, logsumexp_last, softplus, to_f64_scalar, to_f64_vec};

pub const HINGE_MARGIN: f64 = 0.2;
pub const HINGE_PAIRS: usize = 2;
/// Labels at or above this value count as high for hinge sampling.
pub const HINGE_HIGH_LABEL: u8 = 3;
pub const CONT_TEMPERATURE: f64 = 0.5;
pub const CONT_THRESHOLDS: [u8; 4] = [1, 2, 3, 4];

/// Breakdown of loss terms by name.
pub type Breakdown = BTreeMap<String, f64>;

fn span(m: (f64, f64)) -> (f64, f64) {
    (m.0 - m.1 / 2.0, m.0 + m.1 / 2.0)
}

/// Generalized IoU of two `(start, end)` intervals.
pub fn giou_1d(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(e > s) {
            return Err(Error::validation(format!("degenerate interval [{s}, {e}]")));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let hull = a.1.max(b.1) - a.0.min(b.0);
    Ok(inter / union - (hull - union) / hull)
}

/// Matching cost of a predicted `(center, width)` with confidence `conf`
/// against a ground-truth `(center, width)`.
pub fn match_cost(pred: (f64, f64), conf: f64, gt: (f64, f64)) -> f64 {
    let l1 = (pred.0 - gt.0).abs() + (pred.1 - gt.1).abs();
    let giou = match (span(pred), span(gt)) {
        (p, g) if p.1 > p.0 && g.1 > g.0 => giou_1d(p, g).unwrap_or(-1.0),
        _ => -1.0,
    };
    l1 + (1.0 - giou) - conf
}

/// Cost matrix `[gt][query]`.
pub fn cost_matrix(moments: &[(f64, f64)], conf: &[f64], gts: &[(f64, f64)]) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|&g| moments.iter().zip(conf).map(|(&m, &c)| match_cost(m, c, g)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `assignment[g]` is the query matched to ground truth `g`.
    pub assignment: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`)
/// via shortest augmenting paths with potentials. Returns the column of each
/// row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "more rows than columns");
    // 1-based, column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

fn assignment_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
}

/// Tolerance under which two assignment costs count as tied.
pub fn tie_tolerance(cost: &[Vec<f64>]) -> f64 {
    let scale = cost.iter().flatten().fold(1.0f64, |a, &c| a.max(c.abs()));
    1e-9 * scale * cost.len().max(1) as f64
}

/// Optimal assignment; among optimal ones (within [`tie_tolerance`]) the
/// lexicographically smallest column sequence wins, i.e. ties go to the
/// lowest query index, earliest ground truth first.
pub fn optimal_assignment(cost: &[Vec<f64>]) -> MatchResult {
    let best = min_cost_assignment(cost);
    let target = assignment_cost(cost, &best);
    let tol = tie_tolerance(cost);
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_cost = 0.0;
    for r in 0..n {
        let mut chosen = None;
        for c in 0..m {
            if fixed.contains(&c) {
                continue;
            }
            // best completion of the remaining rows with column c taken by row r
            let mut taken = fixed.clone();
            taken.push(c);
            let free: Vec<usize> = (0..m).filter(|j| !taken.contains(j)).collect();
            let sub: Vec<Vec<f64>> = cost[r + 1..]
                .iter()
                .map(|row| free.iter().map(|&j| row[j]).collect())
                .collect();
            let rest: f64 = min_cost_assignment(&sub)
                .iter()
                .enumerate()
                .map(|(i, &j)| sub[i][j])
                .sum();
            if fixed_cost + cost[r][c] + rest <= target + tol {
                chosen = Some(c);
                break;
            }
        }
        let c = chosen.unwrap_or(best[r]);
        fixed_cost += cost[r][c];
        fixed.push(c);
    }
    let cost_total = assignment_cost(cost, &fixed);
    MatchResult {
        assignment: fixed,
        cost: cost_total,
    }
}

/// Matches ground-truth moments to predicted queries.
pub fn hungarian_match(moments: &[(f64, f64)], conf: &[f64], gts: &[(f64, f64)]) -> MatchResult {
    if gts.is_empty() {
        return MatchResult {
            assignment: Vec::new(),
            cost: 0.0,
        };
    }
    assert!(gts.len() <= moments.len(), "more ground truths than queries");
    optimal_assignment(&cost_matrix(moments, conf, gts))
}

/// Differentiable moment terms of one decoder layer.
#[derive(Debug, Clone)]
pub struct MrTerms {
    pub l1: Tensor,
    pub giou: Tensor,
    pub bce: Tensor,
}

impl MrTerms {
    pub fn sum(&self) -> TensorResult<Tensor> {
        (&self.l1 + &self.giou)? + &self.bce
    }

    pub fn weighted(&self, w: &LossWeights) -> TensorResult<Tensor> {
        ((&self.l1 * w.l1)? + (&self.giou * w.giou)?)? + (&self.bce * w.bce)?
    }
}

fn giou_tensor(pred: &Tensor, gt: &Tensor) -> TensorResult<Tensor> {
    let (pc, pw) = (pred.narrow(1, 0, 1)?, pred.narrow(1, 1, 1)?);
    let (gc, gw) = (gt.narrow(1, 0, 1)?, gt.narrow(1, 1, 1)?);
    let ps = (&pc - (&pw * 0.5)?)?;
    let pe = (&pc + (&pw * 0.5)?)?;
    let gs = (&gc - (&gw * 0.5)?)?;
    let ge = (&gc + (&gw * 0.5)?)?;
    let inter = (pe.minimum(&ge)? - ps.maximum(&gs)?)?.relu()?;
    let union = ((&pw + &gw)? - &inter)?;
    let hull = (pe.maximum(&ge)? - ps.minimum(&gs)?)?;
    let iou = (&inter / &union)?;
    let slack = ((&hull - &union)? / &hull)?;
    (iou - slack)?.squeeze(1)
}

/// Moment loss of one layer under a given matching. `gts` are normalized
/// `(center, width)`.
pub fn mr_terms(layer: &LayerOutput, gts: &[(f64, f64)], matching: &MatchResult) -> TensorResult<MrTerms> {
    let nq = layer.logits.dim(0)?;
    let dtype = layer.moments.dtype();
    let device = layer.moments.device();
    let mut target = vec![0.0; nq];
    for &q in &matching.assignment {
        target[q] = 1.0;
    }
    let target = from_f64(&target, &[nq], dtype, device)?;
    let bce = bce_with_logits(&layer.logits, &target)?.mean_all()?;
    if gts.is_empty() {
        let zero = Tensor::zeros((), dtype, device)?;
        return Ok(MrTerms {
            l1: zero.clone(),
            giou: zero,
            bce,
        });
    }
    let idx: Vec<u32> = matching.assignment.iter().map(|&q| q as u32).collect();
    let idx = Tensor::new(idx.as_slice(), device)?;
    let pred = layer.moments.index_select(&idx, 0)?;
    let flat: Vec<f64> = gts.iter().flat_map(|&(c, w)| [c, w]).collect();
    let gt = from_f64(&flat, &[gts.len(), 2], dtype, device)?;
    let l1 = (&pred - &gt)?.abs()?.mean_all()?;
    let giou = giou_tensor(&pred, &gt)?.affine(-1.0, 1.0)?.mean_all()?;
    Ok(MrTerms { l1, giou, bce })
}

/// Matches one layer against the ground truth using its current outputs.
pub fn match_layer(layer: &LayerOutput, gts: &[(f64, f64)]) -> TensorResult<MatchResult> {
    let m = to_f64_vec(&layer.moments)?;
    let moments: Vec<(f64, f64)> = m.chunks(2).map(|c| (c[0], c[1])).collect();
    let conf: Vec<f64> = to_f64_vec(&layer.logits)?
        .iter()
        .map(|&l| 1.0 / (1.0 + (-l).exp()))
        .collect();
    Ok(hungarian_match(&moments, &conf, gts))
}

/// Moment loss terms for the final layer and, when `aux` is set, every
/// intermediate layer (each matched independently).
pub fn mr_loss(preds: &MomentPredictions, gts: &[(f64, f64)], aux: bool) -> TensorResult<Vec<MrTerms>> {
    let layers: &[LayerOutput] = if aux {
        &preds.layers
    } else {
        std::slice::from_ref(preds.last())
    };
    layers
        .iter()
        .map(|layer| mr_terms(layer, gts, &match_layer(layer, gts)?))
        .collect()
}

/// Samples [`HINGE_PAIRS`] (high, low) clip pairs, with replacement. `None`
/// when either side is empty.
pub fn sample_hinge_pairs(labels: &[u8], rng: &mut impl Rng) -> Option<Vec<(usize, usize)>> {
    let high: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= HINGE_HIGH_LABEL).collect();
    let low: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] < HINGE_HIGH_LABEL).collect();
    if high.is_empty() || low.is_empty() {
        return None;
    }
    Some(
        (0..HINGE_PAIRS)
            .map(|_| (*high.choose(rng).unwrap(), *low.choose(rng).unwrap()))
            .collect(),
    )
}

/// Differentiable saliency terms.
#[derive(Debug, Clone)]
pub struct HdTerms {
    pub hinge: Tensor,
    pub neg: Tensor,
    pub cont: Tensor,
    pub hinge_skipped: bool,
}

impl HdTerms {
    pub fn sum(&self) -> TensorResult<Tensor> {
        (&self.hinge + &self.neg)? + &self.cont
    }

    pub fn weighted(&self, w: &LossWeights) -> TensorResult<Tensor> {
        ((&self.hinge * w.hinge)? + (&self.neg * w.neg)?)? + (&self.cont * w.cont)?
    }
}

/// Mean of `max(0, margin + s_low - s_high)` over the given pairs.
pub fn hinge_loss(scores: &Tensor, pairs: &[(usize, usize)]) -> TensorResult<Tensor> {
    let device = scores.device();
    let hi: Vec<u32> = pairs.iter().map(|p| p.0 as u32).collect();
    let lo: Vec<u32> = pairs.iter().map(|p| p.1 as u32).collect();
    let s_hi = scores.index_select(&Tensor::new(hi.as_slice(), device)?, 0)?;
    let s_lo = scores.index_select(&Tensor::new(lo.as_slice(), device)?, 0)?;
    ((s_lo - s_hi)? + HINGE_MARGIN)?.relu()?.mean_all()
}

/// Rank-aware contrastive term at temperature [`CONT_TEMPERATURE`].
pub fn contrastive_loss(scores: &Tensor, labels: &[u8]) -> TensorResult<Tensor> {
    let device = scores.device();
    let logits = (scores / CONT_TEMPERATURE)?;
    let all = logsumexp_last(&logits)?;
    let mut total = Tensor::zeros((), scores.dtype(), device)?;
    let mut counted = 0usize;
    for r in CONT_THRESHOLDS {
        let pos: Vec<u32> = (0..labels.len())
            .filter(|&i| labels[i] >= r)
            .map(|i| i as u32)
            .collect();
        if pos.is_empty() {
            continue;
        }
        counted += 1;
        if pos.len() == labels.len() {
            // every clip positive: -log 1
            continue;
        }
        let sel = logits.index_select(&Tensor::new(pos.as_slice(), device)?, 0)?;
        total = (total + (&all - logsumexp_last(&sel)?)?)?;
    }
    if counted == 0 {
        Ok(total)
    } else {
        total / counted as f64
    }
}

/// Saliency loss. `pairs` are the sampled hinge pairs (`None` skips the
/// hinge term); `neg_scores` are the scores of a mismatched video-query pair.
pub fn hd_loss(
    scores: &Tensor,
    labels: &[u8],
    pairs: Option<&[(usize, usize)]>,
    neg_scores: Option<&Tensor>,
) -> Result<HdTerms> {
    let n = scores.dim(0)?;
    if labels.len() != n {
        return Err(Error::validation(format!("{} labels for {n} scores", labels.len())));
    }
    let zero = Tensor::zeros((), scores.dtype(), scores.device())?;
    let hinge = match pairs {
        Some(p) if !p.is_empty() => hinge_loss(scores, p)?,
        _ => zero.clone(),
    };
    let neg = match neg_scores {
        Some(s) => softplus(s)?.mean_all()?,
        None => zero,
    };
    Ok(HdTerms {
        hinge,
        neg,
        cont: contrastive_loss(scores, labels)?,
        hinge_skipped: pairs.is_none_or(|p| p.is_empty()),
    })
}

/// `exp(-g_mr) * l_mr + 2 * exp(-g_hd) * l_hd + g_mr + g_hd`.
pub fn joint(l_mr: &Tensor, l_hd: &Tensor, gamma_mr: &Tensor, gamma_hd: &Tensor) -> TensorResult<Tensor> {
    let mr = (gamma_mr.neg()?.exp()? * l_mr)?;
    let hd = ((gamma_hd.neg()?.exp()? * l_hd)? * 2.0)?;
    ((mr + hd)? + gamma_mr)? + gamma_hd
}

/// Scalar form of [`joint`].
pub fn joint_value(l_mr: f64, l_hd: f64, gamma_mr: f64, gamma_hd: f64) -> f64 {
    (-gamma_mr).exp() * l_mr + 2.0 * ((-gamma_hd).exp() * l_hd) + gamma_mr + gamma_hd
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossType {
    Sum,
    WeightedSum,
    TaskDependent,
}

impl LossType {
    pub const ALL: [LossType; 3] = [LossType::Sum, LossType::WeightedSum, LossType::TaskDependent];

    pub fn as_str(self) -> &'static str {
        match self {
            LossType::Sum => "sum",
            LossType::WeightedSum => "weighted_sum",
            LossType::TaskDependent => "task_dependent",
        }
    }

    pub fn has_gammas(self) -> bool {
        self == LossType::TaskDependent
    }
}

impl fmt::Display for LossType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        LossType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown loss type {s:?}"))
    }
}

/// Per-term coefficients used by [`LossType::WeightedSum`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub bce: f64,
    pub hinge: f64,
    pub neg: f64,
    pub cont: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 10.0,
            giou: 1.0,
            bce: 4.0,
            hinge: 1.0,
            neg: 1.0,
            cont: 1.0,
        }
    }
}

/// Uncertainty parameters and the last breakdown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossState {
    pub gamma_mr: f64,
    pub gamma_hd: f64,
    pub breakdown: Breakdown,
}

/// Per-item losses before averaging over a batch.
#[derive(Debug, Clone)]
pub struct ItemLoss {
    pub mr: Vec<MrTerms>,
    pub hd: HdTerms,
}

/// Combined batch loss plus scalar breakdown.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Tensor,
    pub breakdown: Breakdown,
}

fn mean(ts: &[Tensor]) -> TensorResult<Tensor> {
    Tensor::stack(ts, 0)?.mean(0)
}

/// Averages item losses and combines the two task losses.
pub fn combine(
    items: &[ItemLoss],
    kind: LossType,
    weights: &LossWeights,
    gammas: Option<(&Tensor, &Tensor)>,
) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let pick = |f: &dyn Fn(&ItemLoss) -> TensorResult<Tensor>| -> TensorResult<Tensor> {
        mean(&items.iter().map(f).collect::<TensorResult<Vec<_>>>()?)
    };
    let final_term = |f: fn(&MrTerms) -> &Tensor| pick(&|it: &ItemLoss| Ok(f(it.mr.last().unwrap()).clone()));
    let l1 = final_term(|t| &t.l1)?;
    let giou = final_term(|t| &t.giou)?;
    let bce = final_term(|t| &t.bce)?;
    let hinge = pick(&|it| Ok(it.hd.hinge.clone()))?;
    let neg = pick(&|it| Ok(it.hd.neg.clone()))?;
    let cont = pick(&|it| Ok(it.hd.cont.clone()))?;

    let weighted = kind == LossType::WeightedSum;
    let layer_loss = |t: &MrTerms| if weighted { t.weighted(weights) } else { t.sum() };
    let aux = pick(&|it| {
        let mut acc = Tensor::zeros((), l1.dtype(), l1.device())?;
        for t in &it.mr[..it.mr.len() - 1] {
            acc = (acc + layer_loss(t)?)?;
        }
        Ok(acc)
    })?;
    let final_terms = MrTerms {
        l1: l1.clone(),
        giou: giou.clone(),
        bce: bce.clone(),
    };
    let hd_terms = HdTerms {
        hinge: hinge.clone(),
        neg: neg.clone(),
        cont: cont.clone(),
        hinge_skipped: false,
    };
    let (l_mr, l_hd) = if weighted {
        ((final_terms.weighted(weights)? + &aux)?, hd_terms.weighted(weights)?)
    } else {
        ((final_terms.sum()? + &aux)?, hd_terms.sum()?)
    };
    let total = match (kind, gammas) {
        (LossType::TaskDependent, Some((g_mr, g_hd))) => joint(&l_mr, &l_hd, g_mr, g_hd)?,
        (LossType::TaskDependent, None) => {
            return Err(Error::validation("task-dependent loss needs gammas"))
        }
        _ => (&l_mr + &l_hd)?,
    };

    let mut breakdown = Breakdown::new();
    for (name, t) in [
        ("l1", &l1),
        ("giou", &giou),
        ("bce", &bce),
        ("aux", &aux),
        ("hinge", &hinge),
        ("neg", &neg),
        ("cont", &cont),
        ("l_mr", &l_mr),
        ("l_hd", &l_hd),
        ("total", &total),
    ] {
        breakdown.insert(name.to_string(), to_f64_scalar(t)?);
    }
    let skipped = items.iter().filter(|it| it.hd.hinge_skipped).count();
    breakdown.insert("hinge_skipped".into(), skipped as f64);
    if let (LossType::TaskDependent, Some((g_mr, g_hd))) = (kind, gammas) {
        breakdown.insert("gamma_mr".into(), to_f64_scalar(g_mr)?);
        breakdown.insert("gamma_hd".into(), to_f64_scalar(g_hd)?);
    }
    Ok(BatchLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(x: f64) -> Tensor {
        Tensor::new(x, &Device::Cpu).unwrap()
    }

    fn layer(moments: &[(f64, f64)], logits: &[f64]) -> LayerOutput {
        let flat: Vec<f64> = moments.iter().flat_map(|&(c, w)| [c, w]).collect();
        LayerOutput {
            moments: Tensor::from_vec(flat, (moments.len(), 2), &Device::Cpu).unwrap(),
            logits: t(logits),
        }
    }

    #[test]
    fn giou_examples() {
        assert_eq!(giou_1d((0.0, 1.0), (0.0, 1.0)).unwrap(), 1.0);
        assert!((giou_1d((0.0, 1.0), (2.0, 3.0)).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(giou_1d((0.0, 1.0), (1.0, 2.0)).unwrap(), 0.0);
        assert!(matches!(giou_1d((1.0, 1.0), (0.0, 2.0)), Err(Error::Validation(_))));
        assert!(giou_1d((0.0, 2.0), (3.0, 1.0)).is_err());
    }

    #[test]
    fn zero_cost_pair_is_matched() {
        let moments = [(0.1, 0.1), (0.3, 0.2), (0.6, 0.1), (0.8, 0.2)];
        let conf = [0.2, 0.3, 0.1, 0.95];
        let m = hungarian_match(&moments, &conf, &[(0.8, 0.2)]);
        assert_eq!(m.assignment, vec![3]);
        assert!(hungarian_match(&moments, &conf, &[]).assignment.is_empty());
    }

    #[test]
    fn optimal_beats_greedy() {
        // greedy on row 0 picks column 0 (1.0) and leaves row 1 with 10.0
        let cost = vec![vec![1.0, 2.0], vec![1.5, 10.0]];
        let m = optimal_assignment(&cost);
        assert_eq!(m.assignment, vec![1, 0]);
        assert_eq!(m.cost, 3.5);
    }

    #[test]
    fn ties_go_to_the_lowest_query() {
        let cost = vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]];
        assert_eq!(optimal_assignment(&cost).assignment, vec![0, 1]);
        let cost = vec![vec![2.0, 1.0, 1.0], vec![1.0, 2.0, 1.0]];
        assert_eq!(optimal_assignment(&cost).assignment, vec![1, 0]);
    }

    // Exhaustive search over injective maps in lexicographic order.
    fn exhaustive(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, f64)>) {
            if row == cost.len() {
                let c = used.iter().enumerate().map(|(r, &q)| cost[r][q]).sum();
                out.push((used.clone(), c));
                return;
            }
            for q in 0..cost[0].len() {
                if !used.contains(&q) {
                    used.push(q);
                    rec(cost, row + 1, used, out);
                    used.pop();
                }
            }
        }
        let mut all = Vec::new();
        rec(cost, 0, &mut Vec::new(), &mut all);
        let min = all.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
        let tol = tie_tolerance(cost);
        all.into_iter().find(|a| a.1 <= min + tol).unwrap()
    }

    proptest! {
        #[test]
        fn matcher_equals_exhaustive(
            nq in 1usize..=6,
            raw in prop::collection::vec((0.05f64..0.95, 0.02f64..0.5, 0.0f64..1.0), 6),
            gts in prop::collection::vec((0.05f64..0.95, 0.02f64..0.5), 0..=6),
        ) {
            let moments: Vec<(f64, f64)> = raw[..nq].iter().map(|r| (r.0, r.1)).collect();
            let conf: Vec<f64> = raw[..nq].iter().map(|r| r.2).collect();
            let gts = &gts[..gts.len().min(nq)];
            let got = hungarian_match(&moments, &conf, gts);
            if gts.is_empty() {
                prop_assert!(got.assignment.is_empty());
            } else {
                let (want, cost) = exhaustive(&cost_matrix(&moments, &conf, gts));
                prop_assert_eq!(got.assignment, want);
                prop_assert!((got.cost - cost).abs() < 1e-12);
            }
        }

        #[test]
        fn giou_properties(a in 0.0f64..10.0, la in 0.01f64..5.0, b in 0.0f64..10.0, lb in 0.01f64..5.0) {
            let (x, y) = ((a, a + la), (b, b + lb));
            let g = giou_1d(x, y).unwrap();
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert_eq!(g, giou_1d(y, x).unwrap());
            let inter = (x.1.min(y.1) - x.0.max(y.0)).max(0.0);
            let iou = inter / ((x.1 - x.0) + (y.1 - y.0) - inter);
            prop_assert!(g <= iou + 1e-15);
        }
    }

    #[test]
    fn l1_example_and_perfect_match() {
        let gts = [(0.5, 0.4)];
        let l = layer(&[(0.5, 0.2)], &[0.0]);
        let terms = mr_terms(&l, &gts, &MatchResult { assignment: vec![0], cost: 0.0 }).unwrap();
        assert!((to_f64_scalar(&terms.l1).unwrap() - 0.1).abs() < 1e-15);
        // gIoU of [0.4,0.6] inside [0.3,0.7] is 0.5
        assert!((to_f64_scalar(&terms.giou).unwrap() - 0.5).abs() < 1e-12);

        let l = layer(&[(0.5, 0.4), (0.1, 0.1)], &[30.0, -30.0]);
        let m = match_layer(&l, &gts).unwrap();
        assert_eq!(m.assignment, vec![0]);
        let terms = mr_terms(&l, &gts, &m).unwrap();
        assert_eq!(to_f64_scalar(&terms.l1).unwrap(), 0.0);
        assert!(to_f64_scalar(&terms.giou).unwrap().abs() < 1e-15);
        assert!(to_f64_scalar(&terms.bce).unwrap() < 1e-12);
    }

    #[test]
    fn no_ground_truth_is_all_background() {
        let l = layer(&[(0.5, 0.4), (0.1, 0.1)], &[0.3, -1.0]);
        let m = match_layer(&l, &[]).unwrap();
        let terms = mr_terms(&l, &[], &m).unwrap();
        assert_eq!(to_f64_scalar(&terms.l1).unwrap(), 0.0);
        assert_eq!(to_f64_scalar(&terms.giou).unwrap(), 0.0);
        let want = ((1.0 + 0.3f64.exp()).ln() + (1.0 + (-1.0f64).exp()).ln()) / 2.0;
        assert!((to_f64_scalar(&terms.bce).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        let s = t(&[0.9, 0.5]);
        assert_eq!(to_f64_scalar(&hinge_loss(&s, &[(0, 1)]).unwrap()).unwrap(), 0.0);
        let s = t(&[0.4, 0.4]);
        assert!((to_f64_scalar(&hinge_loss(&s, &[(0, 1)]).unwrap()).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hinge_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_hinge_pairs(&[4, 4, 3], &mut rng).is_none());
        assert!(sample_hinge_pairs(&[0, 1], &mut rng).is_none());
        let labels = [0, 4, 3, 0, 1];
        for _ in 0..20 {
            let pairs = sample_hinge_pairs(&labels, &mut rng).unwrap();
            assert_eq!(pairs.len(), HINGE_PAIRS);
            for (h, l) in pairs {
                assert!(labels[h] >= 3 && labels[l] < 3);
            }
        }
        let terms = hd_loss(&t(&[0.0, 1.0]), &[0, 0], None, None).unwrap();
        assert!(terms.hinge_skipped);
        assert_eq!(to_f64_scalar(&terms.hinge).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_cases() {
        let s = t(&[0.3, -0.2, 1.0]);
        for label in [0u8, 2, 4] {
            let c = to_f64_scalar(&contrastive_loss(&s, &[label; 3]).unwrap()).unwrap();
            assert_eq!(c, 0.0);
        }
        // labels [4, 0, 2]: thresholds 1,2 -> {0,2}; 3,4 -> {0}
        let labels = [4, 0, 2];
        let e: Vec<f64> = [0.3f64, -0.2, 1.0].iter().map(|x| (x / 0.5).exp()).collect();
        let all = e.iter().sum::<f64>();
        let want = (2.0 * (all / (e[0] + e[2])).ln() + 2.0 * (all / e[0]).ln()) / 4.0;
        let got = to_f64_scalar(&contrastive_loss(&s, &labels).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn negative_pair_term() {
        let terms = hd_loss(&t(&[0.0, 0.0]), &[0, 4], Some(&[(1, 0)]), Some(&t(&[0.0, 2.0]))).unwrap();
        let want = ((2f64).ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((to_f64_scalar(&terms.neg).unwrap() - want).abs() < 1e-12);
        assert!(hd_loss(&t(&[0.0]), &[0, 1], None, None).is_err());
    }

    #[test]
    fn joint_examples() {
        assert_eq!(joint_value(1.0, 0.5, 0.0, 0.0), 2.0);
        let v = joint_value(2.0, 1.0, 2f64.ln(), 0.0);
        assert!((v - (3.0 + 2f64.ln())).abs() < 1e-15);
        let got = joint(&scalar(2.0), &scalar(1.0), &scalar(2f64.ln()), &scalar(0.0)).unwrap();
        assert!((to_f64_scalar(&got).unwrap() - v).abs() < 1e-15);
    }

    #[test]
    fn joint_gamma_gradient() {
        let (l_mr, l_hd) = (1.7, 0.6);
        let g_mr = Var::new(0.3f64, &Device::Cpu).unwrap();
        let g_hd = Var::new(-0.4f64, &Device::Cpu).unwrap();
        let out = joint(&scalar(l_mr), &scalar(l_hd), g_mr.as_tensor(), g_hd.as_tensor()).unwrap();
        let grads = out.backward().unwrap();
        let d_mr = to_f64_scalar(grads.get(g_mr.as_tensor()).unwrap()).unwrap();
        let d_hd = to_f64_scalar(grads.get(g_hd.as_tensor()).unwrap()).unwrap();
        assert!((d_mr - (1.0 - (-0.3f64).exp() * l_mr)).abs() < 1e-12);
        let h = 1e-6;
        let fd = (joint_value(l_mr, l_hd, 0.3, -0.4 + h) - joint_value(l_mr, l_hd, 0.3, -0.4 - h)) / (2.0 * h);
        assert!(((d_hd - fd) / fd.abs().max(1e-6)).abs() < 1e-6);
    }

    #[test]
    fn loss_types_parse() {
        for k in LossType::ALL {
            assert_eq!(k.as_str().parse::<LossType>().unwrap(), k);
        }
        assert!("mean".parse::<LossType>().is_err());
    }

    #[test]
    fn combine_sum_and_task_dependent() {
        let items = vec![ItemLoss {
            mr: vec![
                MrTerms { l1: scalar(0.1), giou: scalar(0.2), bce: scalar(0.3) },
                MrTerms { l1: scalar(1.0), giou: scalar(2.0), bce: scalar(3.0) },
            ],
            hd: HdTerms { hinge: scalar(0.5), neg: scalar(0.25), cont: scalar(0.25), hinge_skipped: false },
        }];
        let w = LossWeights::default();
        let sum = combine(&items, LossType::Sum, &w, None).unwrap();
        assert!((sum.breakdown["total"] - 7.6).abs() < 1e-12);
        assert!(!sum.breakdown.contains_key("gamma_mr"));
        let z = scalar(0.0);
        let td = combine(&items, LossType::TaskDependent, &w, Some((&z, &z))).unwrap();
        assert_eq!(td.breakdown["total"], td.breakdown["l_mr"] + 2.0 * td.breakdown["l_hd"]);
        assert_eq!(td.breakdown["gamma_hd"], 0.0);
        let ws = combine(&items, LossType::WeightedSum, &w, None).unwrap();
        let want = (0.1 * 10.0 + 0.2 + 0.3 * 4.0) + (10.0 + 2.0 + 12.0) + 1.0;
        assert!((ws.breakdown["total"] - want).abs() < 1e-12);
        assert!(combine(&items, LossType::TaskDependent, &w, None).is_err());
    }
}
