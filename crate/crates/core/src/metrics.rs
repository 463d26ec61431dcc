//! IoU, greedy matching, P/R/F1, IoU-weighted F1, COCO-style AP and accuracy.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::coco::{CocoAnnotation, Detection};
use crate::error::{CoreError, Result};

/// Intersection over union of two `[x, y, w, h]` boxes.
pub fn iou(a: [f32; 4], b: [f32; 4]) -> f64 {
    let [ax, ay, aw, ah] = a.map(f64::from);
    let [bx, by, bw, bh] = b.map(f64::from);
    let iw = ((ax + aw).min(bx + bw) - ax.max(bx)).max(0.0);
    let ih = ((ay + ah).min(by + bh) - ay.max(by)).max(0.0);
    let inter = iw * ih;
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(prediction index, gt index)` pairs, in the caller's indexing.
    pub pairs: Vec<(usize, usize)>,
}

/// Indices of `scores` ordered by descending score; equal scores keep input order.
pub fn score_order(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy one-to-one matching: predictions in score order each claim the
/// highest-IoU unmatched gt with IoU at least `thr`.
pub fn match_boxes(preds: &[([f32; 4], f32)], gts: &[[f32; 4]], thr: f64) -> MatchResult {
    let scores: Vec<f32> = preds.iter().map(|p| p.1).collect();
    let mut taken = vec![false; gts.len()];
    let mut res = MatchResult::default();
    for i in score_order(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(preds[i].0, *g);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                res.tp += 1;
                res.pairs.push((i, j));
            }
            None => res.fp += 1,
        }
    }
    res.fn_ = taken.iter().filter(|t| !**t).count();
    res
}

/// Matching over a whole dataset, grouped by `(image, category)`.
pub fn match_detections(preds: &[Detection], gts: &[CocoAnnotation], thr: f64) -> MatchResult {
    let mut groups: BTreeMap<(u64, u32), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        groups.entry((p.image_id, p.category_id)).or_default().0.push(i);
    }
    for (j, g) in gts.iter().enumerate() {
        groups.entry((g.image_id, g.category_id)).or_default().1.push(j);
    }
    let mut total = MatchResult::default();
    for (pi, gi) in groups.values() {
        let p: Vec<_> = pi.iter().map(|&i| (preds[i].bbox, preds[i].score)).collect();
        let g: Vec<_> = gi.iter().map(|&j| gts[j].bbox).collect();
        let m = match_boxes(&p, &g, thr);
        total.tp += m.tp;
        total.fp += m.fp;
        total.fn_ += m.fn_;
        total.pairs.extend(m.pairs.into_iter().map(|(a, b)| (pi[a], gi[b])));
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf1(tp: usize, fp: usize, fn_: usize) -> Prf1 {
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf1 { precision, recall, f1 }
}

pub const WF1_THRESHOLDS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

/// `(0.6 F1@0.6 + 0.7 F1@0.7 + 0.8 F1@0.8 + 0.9 F1@0.9) / 3`.
///
/// Inputs may be fractions or percentages but not a mix of the two; zero is
/// valid on either scale.
pub fn weighted_f1(f1: [f64; 4]) -> Result<f64> {
    if f1.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 100.0) {
        return Err(CoreError::invalid("weighted_f1", format!("values {f1:?} outside [0, 100]")));
    }
    let fractional = f1.iter().any(|&v| v > 0.0 && v < 1.0);
    let percent = f1.iter().any(|&v| v > 1.0);
    if fractional && percent {
        return Err(CoreError::invalid("weighted_f1", format!("mixed scales in {f1:?}")));
    }
    let weights: f64 = WF1_THRESHOLDS.iter().sum();
    Ok(WF1_THRESHOLDS.iter().zip(f1).map(|(t, v)| t * v).sum::<f64>() / weights)
}

/// F1 at each weighting threshold and the weighted score, all as fractions.
pub fn weighted_f1_from_detections(preds: &[Detection], gts: &[CocoAnnotation]) -> Result<([f64; 4], f64)> {
    let f1 = WF1_THRESHOLDS.map(|t| {
        let m = match_detections(preds, gts, t);
        prf1(m.tp, m.fp, m.fn_).f1
    });
    Ok((f1, weighted_f1(f1)?))
}

pub const RECALL_POINTS: usize = 101;

/// Precision/recall sweep for one category: per-image greedy matching,
/// then a global descending-score sweep. Returns `(precision, recall)` per
/// prediction rank and the number of gts.
pub fn pr_curve(preds: &[Detection], gts: &[CocoAnnotation], thr: f64) -> (Vec<(f64, f64)>, usize) {
    let m = match_detections(preds, gts, thr);
    let mut is_tp = vec![false; preds.len()];
    for &(p, _) in &m.pairs {
        is_tp[p] = true;
    }
    let scores: Vec<f32> = preds.iter().map(|p| p.score).collect();
    let npos = gts.len();
    let mut tp = 0usize;
    let curve = score_order(&scores)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            tp += usize::from(is_tp[i]);
            let precision = tp as f64 / (rank + 1) as f64;
            let recall = if npos == 0 { 0.0 } else { tp as f64 / npos as f64 };
            (precision, recall)
        })
        .collect();
    (curve, npos)
}

/// 101-point interpolated AP; precision at recall `r` is the best precision
/// achieved at any recall `>= r`. Zero when there are no gts.
pub fn average_precision(preds: &[Detection], gts: &[CocoAnnotation], thr: f64) -> f64 {
    let (curve, npos) = pr_curve(preds, gts, thr);
    if npos == 0 || curve.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = curve.iter().map(|c| c.0).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    let mut k = 0;
    for step in 0..RECALL_POINTS {
        let r = step as f64 / (RECALL_POINTS - 1) as f64;
        while k < curve.len() && curve[k].1 < r - 1e-12 {
            k += 1;
        }
        if k == curve.len() {
            break;
        }
        total += envelope[k];
    }
    total / RECALL_POINTS as f64
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategoryAp {
    pub category_id: u32,
    /// AP at each of the ten IoU thresholds; `None` when the category has no gt.
    pub ap: Option<[f64; 10]>,
    pub map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub categories: Vec<CategoryAp>,
    /// Mean over categories that occur in the ground truth.
    pub overall: f64,
}

pub fn map_range(preds: &[Detection], gts: &[CocoAnnotation], categories: &[u32]) -> MapReport {
    let thresholds = coco_iou_thresholds();
    let mut rows = Vec::with_capacity(categories.len());
    let mut present = Vec::new();
    for &cat in categories {
        let p: Vec<Detection> = preds.iter().filter(|d| d.category_id == cat).cloned().collect();
        let g: Vec<CocoAnnotation> = gts.iter().filter(|a| a.category_id == cat).cloned().collect();
        if g.is_empty() {
            rows.push(CategoryAp { category_id: cat, ap: None, map: None });
            continue;
        }
        let ap = thresholds.map(|t| average_precision(&p, &g, t));
        let map = ap.iter().sum::<f64>() / ap.len() as f64;
        present.push(map);
        rows.push(CategoryAp { category_id: cat, ap: Some(ap), map: Some(map) });
    }
    let overall = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapReport { categories: rows, overall }
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(CoreError::invalid(
            "accuracy",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(CoreError::invalid("accuracy", "no labels"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}
