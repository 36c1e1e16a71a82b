use serde::{Deserialize, Serialize};

use super::anchors::AnchorLabel;
use crate::error::{Error, Result};
use crate::grad::{cross_entropy, Tape, Var};

/// Objectness loss options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Mask background terms the model already scores above `p_th`.
    pub mce: bool,
    pub p_th: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mce: false,
            p_th: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        validate_threshold(self.p_th)
    }

    fn threshold(&self) -> Option<f64> {
        self.mce.then_some(self.p_th)
    }
}

/// `p_th = 0` is accepted: it masks every background anchor with nonzero
/// confidence, which is the degenerate end of a threshold sweep.
fn validate_threshold(p_th: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p_th) {
        return Err(Error::Config(format!("p_th {p_th} outside [0, 1)")));
    }
    Ok(())
}

/// Masked cross-entropy of one prediction: zero for a background label the
/// model scores above `p_th`, the usual cross-entropy otherwise.
pub fn mce_term(p: f64, target: f64, p_th: f64) -> Result<f64> {
    validate_threshold(p_th)?;
    if target == 0.0 && p > p_th {
        return Ok(0.0);
    }
    Ok(cross_entropy(p, target))
}

/// Mean objectness loss over non-ignored anchors. With `p_th` set, masked
/// background anchors contribute nothing but still count in the mean, so
/// masking can only lower the loss.
pub fn objectness_loss(
    tape: &mut Tape,
    p: Var,
    labels: &[AnchorLabel],
    p_th: Option<f64>,
) -> Result<Var> {
    if let Some(t) = p_th {
        validate_threshold(t)?;
    }
    let probs = tape.value(p).data();
    if probs.len() != labels.len() {
        return Err(Error::shape(
            "objectness_loss",
            format!("{} probabilities, {} labels", probs.len(), labels.len()),
        ));
    }
    let active = labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
    let unit = if active == 0 { 0.0 } else { 1.0 / active as f64 };
    let mut target = Vec::with_capacity(labels.len());
    let mut weight = Vec::with_capacity(labels.len());
    for (&prob, label) in probs.iter().zip(labels) {
        let (t, w) = match label {
            AnchorLabel::Positive => (1.0, unit),
            AnchorLabel::Ignore => (0.0, 0.0),
            AnchorLabel::Negative => match p_th {
                Some(th) if prob > th => (0.0, 0.0),
                _ => (0.0, unit),
            },
        };
        target.push(t);
        weight.push(w);
    }
    tape.weighted_bce(p, target, weight)
}

/// Mean objectness loss in the configured mode.
pub fn rpn_cls_loss(tape: &mut Tape, p: Var, labels: &[AnchorLabel], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    objectness_loss(tape, p, labels, cfg.threshold())
}

/// Masked cross-entropy of a probability tensor against `{0,1}` labels,
/// averaged over all entries.
pub fn mce_loss(tape: &mut Tape, p: Var, target: &[f64], p_th: f64) -> Result<Var> {
    let labels: Vec<AnchorLabel> = target
        .iter()
        .map(|&t| {
            if t == 1.0 {
                Ok(AnchorLabel::Positive)
            } else if t == 0.0 {
                Ok(AnchorLabel::Negative)
            } else {
                Err(Error::Input(format!("label {t} is not 0 or 1")))
            }
        })
        .collect::<Result<_>>()?;
    objectness_loss(tape, p, &labels, Some(p_th))
}

/// The five detector loss terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_loc: f64,
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.rpn_cls, self.rpn_loc, self.cls, self.reg, self.dir]
    }
}
