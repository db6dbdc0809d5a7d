//! Detection metrics: per-class AP (all-point interpolation) and recall at
//! several 3D IoU thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_3d, Box3D};

pub const THRESHOLDS: [f64; 3] = [0.25, 0.50, 0.70];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap25: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub ar25: f64,
    pub ar50: f64,
    pub ar70: f64,
    pub num_gt: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(rename = "mAP25")]
    pub map25: f64,
    #[serde(rename = "mAP50")]
    pub map50: f64,
    #[serde(rename = "mAP70")]
    pub map70: f64,
    #[serde(rename = "mAR25")]
    pub mar25: f64,
    #[serde(rename = "mAR50")]
    pub mar50: f64,
    #[serde(rename = "mAR70")]
    pub mar70: f64,
}

/// Area under the precision envelope given true-positive flags in ranked
/// order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for i in 0..prec.len() {
        if rec[i] > last_r {
            ap += (rec[i] - last_r) * prec[i];
            last_r = rec[i];
        }
    }
    ap
}

/// Greedy matching for one class: predictions in descending score (stable
/// by scene, then index) each claim the best unmatched same-scene GT box
/// with IoU at least `thresh`. Returns ranked TP flags and the match count.
pub fn match_class(preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], class_id: usize, thresh: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (s, ps) in preds.iter().enumerate() {
        for (i, p) in ps.iter().enumerate() {
            if p.class_id == class_id {
                ranked.push((s, i));
            }
        }
    }
    ranked.sort_by(|a, b| {
        let (sa, sb) = (preds[a.0][a.1].score.unwrap_or(0.0), preds[b.0][b.1].score.unwrap_or(0.0));
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    let mut matched = 0;
    for (s, i) in ranked {
        let p = &preds[s][i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.get(s).map(|v| v.as_slice()).unwrap_or(&[]).iter().enumerate() {
            if gt.class_id != class_id || used[s][j] {
                continue;
            }
            let iou = iou_3d(p, gt);
            if iou >= thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                used[s][j] = true;
                matched += 1;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    (tp, matched)
}

/// Per-class and mean AP/AR over scenes. Classes without ground truth are
/// listed but left out of the means.
pub fn evaluate(preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], class_names: &[&str]) -> Metrics {
    let mut m = Metrics::default();
    let mut sums = [0.0; 6];
    let mut counted = 0usize;
    for (k, name) in class_names.iter().enumerate() {
        let num_gt = gts.iter().flatten().filter(|b| b.class_id == k).count();
        let mut vals = [0.0; 6];
        for (t, &thr) in THRESHOLDS.iter().enumerate() {
            let (tp, matched) = match_class(preds, gts, k, thr);
            vals[t] = average_precision(&tp, num_gt);
            vals[3 + t] = if num_gt == 0 { 0.0 } else { matched as f64 / num_gt as f64 };
        }
        if num_gt > 0 {
            counted += 1;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
        }
        m.per_class.insert(
            name.to_string(),
            ClassMetrics {
                ap25: vals[0],
                ap50: vals[1],
                ap70: vals[2],
                ar25: vals[3],
                ar50: vals[4],
                ar70: vals[5],
                num_gt,
            },
        );
    }
    if counted > 0 {
        let c = counted as f64;
        [m.map25, m.map50, m.map70, m.mar25, m.mar50, m.mar70] = sums.map(|s| s / c);
    }
    m
}
