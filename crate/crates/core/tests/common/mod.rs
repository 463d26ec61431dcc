#![allow(dead_code)]

use dit_core::coco::{CocoAnnotation, Detection};

// Independent reference: exhaustive matching per image, precision envelope by
// scanning every prefix for each recall point.
pub fn oracle_iou(a: [f32; 4], b: [f32; 4]) -> f64 {
    let (a, b) = (a.map(f64::from), b.map(f64::from));
    let x0 = a[0].max(b[0]);
    let y0 = a[1].max(b[1]);
    let x1 = (a[0] + a[2]).min(b[0] + b[2]);
    let y1 = (a[1] + a[3]).min(b[1] + b[3]);
    let inter = if x1 > x0 && y1 > y0 { (x1 - x0) * (y1 - y0) } else { 0.0 };
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

pub fn oracle_ap(preds: &[Detection], gts: &[CocoAnnotation], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<usize> = (0..preds.len()).collect();
    // insertion sort: stable, descending score
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 && preds[ranked[j - 1]].score < preds[ranked[j]].score {
            ranked.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &i in &ranked {
        let p = &preds[i];
        let mut best = None;
        let mut best_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image_id != p.image_id || g.category_id != p.category_id {
                continue;
            }
            let v = oracle_iou(p.bbox, g.bbox);
            if v >= thr && v > best_iou {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used[j] = true;
        }
        hits.push(best.is_some());
    }
    let points: Vec<(f64, f64)> = (1..=hits.len())
        .map(|n| {
            let tp = hits[..n].iter().filter(|&&h| h).count() as f64;
            (tp / n as f64, tp / gts.len() as f64)
        })
        .collect();
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            points.iter().filter(|p| p.1 >= r - 1e-12).map(|p| p.0).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

pub fn oracle_map(preds: &[Detection], gts: &[CocoAnnotation], cats: &[u32]) -> f64 {
    let mut per_cat = Vec::new();
    for &c in cats {
        let g: Vec<_> = gts.iter().filter(|a| a.category_id == c).cloned().collect();
        if g.is_empty() {
            continue;
        }
        let p: Vec<_> = preds.iter().filter(|d| d.category_id == c).cloned().collect();
        let s: f64 = (0..10).map(|i| oracle_ap(&p, &g, 0.5 + 0.05 * i as f64)).sum();
        per_cat.push(s / 10.0);
    }
    if per_cat.is_empty() { 0.0 } else { per_cat.iter().sum::<f64>() / per_cat.len() as f64 }
}
