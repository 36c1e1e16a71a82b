use std::cmp::Ordering;

use crate::eval::rotated_iou;
use crate::geom::RotatedBox;

/// Indices sorted by descending score, lower index first on ties.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression over `candidates` (already in priority
/// order). A box survives if its IoU with every earlier survivor is at most
/// `iou_thresh`.
pub fn nms(boxes: &[RotatedBox], candidates: &[usize], iou_thresh: f64, limit: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for &i in candidates {
        if keep.len() >= limit {
            break;
        }
        if keep.iter().all(|&k| rotated_iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Top `k_pre` by score, NMS at `nms_iou`, then the first `k_post` survivors.
pub fn select_proposals(
    scores: &[f64],
    boxes: &[RotatedBox],
    k_pre: usize,
    k_post: usize,
    nms_iou: f64,
) -> Vec<usize> {
    let ranked: Vec<usize> = rank_by_score(scores).into_iter().take(k_pre).collect();
    nms(boxes, &ranked, nms_iou, k_post)
}
