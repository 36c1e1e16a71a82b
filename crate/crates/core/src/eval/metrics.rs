use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::iou::rotated_iou;
use crate::detector::Detection;
use crate::geom::RotatedBox;

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, ground-truth index, IoU)` for every true positive.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Detection indices by descending score; ties keep the lower index first.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy score-ordered matching: each detection, best first, takes the
/// unmatched ground truth with the highest IoU at or above `iou_thresh`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[RotatedBox],
    iou_thresh: f64,
    max_dets: usize,
) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let considered: Vec<usize> = score_order(dets).into_iter().take(max_dets).collect();
    for &d in &considered {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = rotated_iou(&dets[d].bbox, gt);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, iou)) = best {
            taken[g] = true;
            pairs.push((d, g, iou));
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: considered.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    }
}

/// `(precision, recall)`; an empty denominator counts as perfect (1.0).
pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    (ratio(m.tp, m.tp + m.fp), ratio(m.tp, m.tp + m.fn_))
}

/// One image's detections and full ground truth.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<RotatedBox>,
}

/// Number of evenly spaced recall points used for AP interpolation.
pub const RECALL_POINTS: usize = 101;

/// Default per-image detection budget when computing AP.
pub const AP_MAX_DETS: usize = 100;

/// Area under the interpolated precision/recall curve at one IoU threshold.
///
/// Detections from every image are pooled and ranked by score; precision is
/// made monotone from the right and sampled at 101 recall points.
pub fn average_precision(images: &[ImageEval], iou_thresh: f64) -> f64 {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut total_gt = 0;
    for img in images {
        total_gt += img.ground_truth.len();
        let m = match_detections(&img.detections, &img.ground_truth, iou_thresh, AP_MAX_DETS);
        let tp_dets: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        for d in score_order(&img.detections).into_iter().take(AP_MAX_DETS) {
            scored.push((img.detections[d].score, tp_dets.contains(&d)));
        }
    }
    if total_gt == 0 {
        return if scored.is_empty() { 1.0 } else { 0.0 };
    }
    // Stable sort keeps image order, then in-image rank, for equal scores.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &scored {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for j in 0..RECALL_POINTS {
        let r = j as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// IoU thresholds `0.50, 0.55, …, 0.95` used for average recall.
pub fn recall_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Recall at `max_dets` detections per image, averaged over IoU 0.5:0.05:0.95.
pub fn average_recall(images: &[ImageEval], max_dets: usize) -> f64 {
    let total_gt: usize = images.iter().map(|i| i.ground_truth.len()).sum();
    if total_gt == 0 {
        return 1.0;
    }
    let thresholds = recall_thresholds();
    let sum: f64 = thresholds
        .iter()
        .map(|&t| {
            let tp: usize = images
                .iter()
                .map(|img| match_detections(&img.detections, &img.ground_truth, t, max_dets).tp)
                .sum();
            tp as f64 / total_gt as f64
        })
        .sum();
    sum / thresholds.len() as f64
}
