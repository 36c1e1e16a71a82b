use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::rotated_iou;
use crate::geom::{angle_delta, RotatedBox};

/// Rotated anchor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    /// Degrees; folded into `[0, 180)` when anchors are built.
    pub angles: Vec<f64>,
    pub aspect_ratio: f64,
    /// Anchor lengths in grid cells.
    pub scales: Vec<f64>,
    /// Grid cells per feature-map cell.
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            angles: vec![-90.0, -45.0, 0.0, 45.0],
            aspect_ratio: 2.5,
            scales: vec![11.0],
            stride: 4,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() || self.scales.is_empty() {
            return Err(Error::Config("anchors need at least one angle and one scale".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("anchor scales {:?} must be positive", self.scales)));
        }
        if !(self.aspect_ratio.is_finite() && self.aspect_ratio >= 1.0) {
            return Err(Error::Config(format!("anchor aspect ratio {} below 1", self.aspect_ratio)));
        }
        if self.stride == 0 {
            return Err(Error::Config("anchor stride must be positive".into()));
        }
        Ok(())
    }

    /// Anchors per feature-map cell.
    pub fn per_cell(&self) -> usize {
        self.angles.len() * self.scales.len()
    }
}

/// One anchor per (cell, angle, scale), ordered row-major over cells, then
/// by angle, then by scale.
pub fn generate_anchors(config: &AnchorConfig, rows: usize, cols: usize) -> Vec<RotatedBox> {
    let s = config.stride as f64;
    let mut out = Vec::with_capacity(rows * cols * config.per_cell());
    for r in 0..rows {
        for c in 0..cols {
            let (cx, cy) = ((c as f64 + 0.5) * s, (r as f64 + 0.5) * s);
            for &angle in &config.angles {
                for &len in &config.scales {
                    out.push(RotatedBox::new(cx, cy, len, len / config.aspect_ratio, angle, true));
                }
            }
        }
    }
    out
}

/// Largest magnitude allowed for a log-size offset when decoding.
pub const MAX_LOG_SCALE: f64 = 4.0;

/// Regression target of `gt` relative to `reference`:
/// `(Δcx/l, Δcy/l, log(l'/l), log(w'/w), Δθ/90)`.
pub fn encode_offsets(reference: &RotatedBox, gt: &RotatedBox) -> [f64; 5] {
    [
        (gt.cx - reference.cx) / reference.length,
        (gt.cy - reference.cy) / reference.length,
        (gt.length / reference.length).ln(),
        (gt.width / reference.width).ln(),
        angle_delta(reference.angle, gt.angle) / 90.0,
    ]
}

/// Inverse of [`encode_offsets`], with log-size offsets clamped.
pub fn decode_offsets(reference: &RotatedBox, d: &[f64]) -> RotatedBox {
    let clamp = |v: f64| v.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    RotatedBox::new(
        reference.cx + d[0] * reference.length,
        reference.cy + d[1] * reference.length,
        reference.length * clamp(d[2]).exp(),
        reference.width * clamp(d[3]).exp(),
        reference.angle + 90.0 * d[4].clamp(-2.0, 2.0),
        reference.forward,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor training targets for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Index into the kept boxes for positive anchors.
    pub matched: Vec<Option<usize>>,
    /// Regression targets; meaningful for positive anchors only.
    pub offsets: Vec<[f64; 5]>,
}

impl AnchorTargets {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l == AnchorLabel::Positive).count()
    }
}

/// IoU thresholds for anchor labelling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds {
            positive: 0.5,
            negative: 0.2,
        }
    }
}

/// Labels anchors against the kept boxes: positive at IoU ≥ `positive`,
/// negative below `negative`, ignored in between. Each kept box's best
/// anchor (lowest index on ties) is forced positive.
pub fn assign_targets(
    anchors: &[RotatedBox],
    kept: &[RotatedBox],
    thresholds: MatchThresholds,
) -> AnchorTargets {
    let n = anchors.len();
    let mut best = vec![(0.0f64, None::<usize>); n];
    let mut per_box_best = vec![(0.0f64, None::<usize>); kept.len()];
    for (g, gt) in kept.iter().enumerate() {
        for (i, a) in anchors.iter().enumerate() {
            let iou = rotated_iou(a, gt);
            if iou > best[i].0 {
                best[i] = (iou, Some(g));
            }
            if iou > per_box_best[g].0 {
                per_box_best[g] = (iou, Some(i));
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|(iou, _)| {
            if *iou >= thresholds.positive {
                AnchorLabel::Positive
            } else if *iou < thresholds.negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    let mut matched: Vec<Option<usize>> = best
        .iter()
        .zip(&labels)
        .map(|((_, g), l)| if *l == AnchorLabel::Positive { *g } else { None })
        .collect();
    for (g, (_, anchor)) in per_box_best.iter().enumerate() {
        if let Some(i) = *anchor {
            if labels[i] != AnchorLabel::Positive {
                labels[i] = AnchorLabel::Positive;
                matched[i] = Some(g);
            }
        }
    }
    let offsets = anchors
        .iter()
        .zip(&matched)
        .map(|(a, m)| m.map_or([0.0; 5], |g| encode_offsets(a, &kept[g])))
        .collect();
    AnchorTargets {
        labels,
        matched,
        offsets,
    }
}
