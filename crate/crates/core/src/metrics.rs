//! Retrieval and saliency metrics: R1@t, mAP over tIoU thresholds, HD mAP
//! and HIT@1.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{Annotation, PredictionRecord};

/// Clip label at or above which a clip counts as a highlight.
pub const VERY_GOOD_LABEL: u8 = 4;

/// `0.50, 0.55, ..., 0.95`.
pub fn tiou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Temporal IoU of two `(start, end)` windows; 0 when the union is empty.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Predicted `[start, end, score]` windows and ground-truth windows of one
/// query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MrQuery {
    pub preds: Vec<[f64; 3]>,
    pub gts: Vec<[f64; 2]>,
}

/// Descending score, ties by earlier start.
pub fn rank_windows(preds: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut v = preds.to_vec();
    v.sort_by(|a, b| {
        b[2].partial_cmp(&a[2])
            .unwrap_or(Ordering::Equal)
            .then(a[0].partial_cmp(&b[0]).unwrap_or(Ordering::Equal))
    });
    v
}

/// Fraction of queries whose top-ranked window reaches `threshold` tIoU with
/// any ground truth.
pub fn recall_at_1(queries: &[MrQuery], threshold: f64) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .filter(|q| {
            rank_windows(&q.preds).first().is_some_and(|top| {
                q.gts
                    .iter()
                    .any(|g| tiou((top[0], top[1]), (g[0], g[1])) >= threshold)
            })
        })
        .count();
    hits as f64 / queries.len() as f64
}

/// Greedy matching of ranked predictions; `true` marks a true positive.
pub fn greedy_matches(preds: &[[f64; 3]], gts: &[[f64; 2]], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    rank_windows(preds)
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let iou = tiou((p[0], p[1]), (g[0], g[1]));
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision-envelope curve for a ranked list of hits with
/// `num_pos` positives in total.
pub fn envelope_ap(hits: &[bool], num_pos: usize) -> f64 {
    if num_pos == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        recall.push(tp as f64 / num_pos as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Average precision of one query at one tIoU threshold.
pub fn average_precision(query: &MrQuery, threshold: f64) -> f64 {
    envelope_ap(&greedy_matches(&query.preds, &query.gts, threshold), query.gts.len())
}

/// Mean AP over queries for each threshold. Queries without ground truth
/// are skipped.
pub fn mr_map(queries: &[MrQuery], thresholds: &[f64]) -> Vec<f64> {
    let scored: Vec<&MrQuery> = queries.iter().filter(|q| !q.gts.is_empty()).collect();
    thresholds
        .iter()
        .map(|&t| {
            if scored.is_empty() {
                0.0
            } else {
                scored.iter().map(|q| average_precision(q, t)).sum::<f64>() / scored.len() as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MrEvalResult {
    pub r1_050: f64,
    pub r1_070: f64,
    pub map_050: f64,
    pub map_075: f64,
    pub map_avg: f64,
}

pub fn evaluate_mr(queries: &[MrQuery]) -> MrEvalResult {
    let thresholds = tiou_thresholds();
    let maps = mr_map(queries, &thresholds);
    MrEvalResult {
        r1_050: recall_at_1(queries, 0.5),
        r1_070: recall_at_1(queries, 0.7),
        map_050: maps[0],
        map_075: maps[5],
        map_avg: maps.iter().sum::<f64>() / maps.len() as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HdEvalResult {
    pub map: f64,
    pub hit1: f64,
}

/// Clip indices by descending score, ties by lower index.
fn rank_clips(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// AP of the clip ranking; `None` when the item has no positive clip.
pub fn clip_ap(scores: &[f64], labels: &[u8], threshold: u8) -> Option<f64> {
    let hits: Vec<bool> = rank_clips(scores).iter().map(|&i| labels[i] >= threshold).collect();
    let num_pos = hits.iter().filter(|&&h| h).count();
    (num_pos > 0).then(|| envelope_ap(&hits, num_pos))
}

/// Saliency metrics over `(scores, labels)` items. Items without positives
/// count as misses for HIT@1 and are left out of mAP.
pub fn hd_eval(items: &[(Vec<f64>, Vec<u8>)], threshold: u8) -> Result<HdEvalResult> {
    let mut aps = Vec::new();
    let mut hits = 0usize;
    for (scores, labels) in items {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::validation(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels[rank_clips(scores)[0]] >= threshold {
            hits += 1;
        }
        aps.extend(clip_ap(scores, labels, threshold));
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(HdEvalResult {
        map: mean(&aps),
        hit1: if items.is_empty() { 0.0 } else { hits as f64 / items.len() as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub mr: MrEvalResult,
    pub hd: HdEvalResult,
    pub num_queries: usize,
}

/// Joins predictions with annotations by query id and computes both metric
/// families.
pub fn evaluate(preds: &[PredictionRecord], gts: &[Annotation], threshold: u8) -> Result<EvalReport> {
    let by_qid: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.qid.as_str(), p)).collect();
    let mut queries = Vec::with_capacity(gts.len());
    let mut items = Vec::with_capacity(gts.len());
    for a in gts {
        let p = by_qid
            .get(a.qid.as_str())
            .ok_or_else(|| Error::validation(format!("no prediction for query {}", a.qid)))?;
        queries.push(MrQuery {
            preds: p.pred_windows.clone(),
            gts: a.relevant_windows.clone(),
        });
        if p.pred_saliency.len() != a.saliency_labels.len() {
            return Err(Error::validation(format!(
                "query {}: {} saliency scores for {} clips",
                a.qid,
                p.pred_saliency.len(),
                a.saliency_labels.len()
            )));
        }
        items.push((p.pred_saliency.clone(), a.saliency_labels.clone()));
    }
    Ok(EvalReport {
        mr: evaluate_mr(&queries),
        hd: hd_eval(&items, threshold)?,
        num_queries: queries.len(),
    })
}
