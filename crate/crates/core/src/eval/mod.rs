//! Detection metrics: exact rotated IoU, greedy matching, AP and AR.

mod iou;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::grad::ParamStore;
use crate::scene::Sample;

pub use iou::{clip_convex, intersection_area, rotated_iou, signed_area};
pub use metrics::{
    average_precision, average_recall, match_detections, precision_recall, recall_thresholds,
    score_order, ImageEval, MatchResult, AP_MAX_DETS, RECALL_POINTS,
};

/// Which sensors the model may see at evaluation time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityMask {
    #[default]
    Both,
    WithoutRadar,
    WithoutLidar,
}

impl ModalityMask {
    pub fn apply(self, sample: &Sample) -> Sample {
        let mut s = sample.clone();
        match self {
            ModalityMask::Both => {}
            ModalityMask::WithoutRadar => s.radar = None,
            ModalityMask::WithoutLidar => s.lidar = None,
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Step of the IoU grid `0.5, 0.5 + step, …, 0.9` behind `ap_mean`.
    pub mean_ap_step: f64,
    #[serde(default)]
    pub modality_mask: ModalityMask,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mean_ap_step: 0.05,
            modality_mask: ModalityMask::Both,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_ap_step > 0.0 && self.mean_ap_step <= 0.4) {
            return Err(Error::Config(format!(
                "mean_ap_step {} outside (0, 0.4]",
                self.mean_ap_step
            )));
        }
        Ok(())
    }

    pub fn mean_ap_thresholds(&self) -> Vec<f64> {
        let steps = (0.4 / self.mean_ap_step + 1e-9).floor() as usize;
        (0..=steps).map(|i| 0.5 + self.mean_ap_step * i as f64).collect()
    }
}

/// The reporting grid: AP at three IoU thresholds, mean AP, AR at three
/// detection budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap50: f64,
    pub ap65: f64,
    pub ap80: f64,
    pub ap_mean: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
}

impl EvalSummary {
    pub fn values(&self) -> [f64; 7] {
        [
            self.ap50,
            self.ap65,
            self.ap80,
            self.ap_mean,
            self.ar1,
            self.ar10,
            self.ar100,
        ]
    }

    pub const FIELDS: [&'static str; 7] = ["ap50", "ap65", "ap80", "ap_mean", "ar1", "ar10", "ar100"];

    /// Field-wise mean of several summaries.
    pub fn mean(items: &[EvalSummary]) -> Option<EvalSummary> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let m = |f: fn(&EvalSummary) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(EvalSummary {
            ap50: m(|s| s.ap50),
            ap65: m(|s| s.ap65),
            ap80: m(|s| s.ap80),
            ap_mean: m(|s| s.ap_mean),
            ar1: m(|s| s.ar1),
            ar10: m(|s| s.ar10),
            ar100: m(|s| s.ar100),
        })
    }
}

pub fn summarize(images: &[ImageEval], cfg: &EvalConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let thresholds = cfg.mean_ap_thresholds();
    let ap_mean = thresholds
        .iter()
        .map(|&t| average_precision(images, t))
        .sum::<f64>()
        / thresholds.len() as f64;
    Ok(EvalSummary {
        ap50: average_precision(images, 0.5),
        ap65: average_precision(images, 0.65),
        ap80: average_precision(images, 0.8),
        ap_mean,
        ar1: average_recall(images, 1),
        ar10: average_recall(images, 10),
        ar100: average_recall(images, 100),
    })
}

/// Runs the detector over `samples` and scores it against the full ground
/// truth, whatever annotations the samples carry.
pub fn evaluate(
    detector: &Detector,
    params: &ParamStore,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<EvalSummary> {
    let images = samples
        .iter()
        .map(|s| {
            let masked = cfg.modality_mask.apply(s);
            Ok(ImageEval {
                detections: detector.infer(params, &masked)?,
                ground_truth: s.ground_truth(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(&images, cfg)
}
