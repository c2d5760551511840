//! Composite grounding loss: `λ_cls·L_cls + λ_giou·L_giou + L_L1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BoxCxCyWH};
use crate::model::ForwardVars;
use crate::tensor::{Scalar, Tape, Var};

/// Probability floor applied before the log in the classification loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 100.0,
            lambda_giou: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cls >= 0.0 && self.lambda_giou >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be >= 0, got {self:?}")))
        }
    }
}

/// Proposal with the highest IoU against `gt` (lowest index on ties). When
/// no proposal overlaps, the one with the nearest center in L1 distance.
pub fn cls_target(boxes: &[BoxCxCyWH], gt: &BoxCxCyWH) -> usize {
    let mut best = (0, 0.0);
    for (i, b) in boxes.iter().enumerate() {
        let v = geometry::iou(b, gt);
        if v > best.1 {
            best = (i, v);
        }
    }
    if best.1 > 0.0 {
        return best.0;
    }
    let mut nearest = (0, f64::INFINITY);
    for (i, b) in boxes.iter().enumerate() {
        let d = (b.cx - gt.cx).abs() + (b.cy - gt.cy).abs();
        if d < nearest.1 {
            nearest = (i, d);
        }
    }
    nearest.0
}

/// `-ln max(p_r, 1e-12)`.
pub fn cls_loss(p: &[f64], r: usize) -> f64 {
    -p[r].max(PROB_FLOOR).ln()
}

/// `(1 − GIoU, ‖pred − gt‖₁)` with the L1 norm summed over cx, cy, w, h.
pub fn box_losses(pred: &BoxCxCyWH, gt: &BoxCxCyWH) -> (f64, f64) {
    let l1 = pred
        .to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    (1.0 - geometry::giou(pred, gt), l1)
}

pub fn total_loss(p: &[f64], r: usize, pred: &BoxCxCyWH, gt: &BoxCxCyWH, w: &LossWeights) -> f64 {
    let (l_giou, l_l1) = box_losses(pred, gt);
    w.lambda_cls * cls_loss(p, r) + w.lambda_giou * l_giou + l_l1
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
}

/// Records the composite loss of a forward pass against target index `r`
/// and ground-truth box `gt`.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    fwd: &ForwardVars,
    r: usize,
    gt: &BoxCxCyWH,
    w: &LossWeights,
) -> Result<LossVars> {
    let cls = tape.pick_neg_log(fwd.probs, r, T::from_f64(PROB_FLOOR))?;
    let giou = tape.giou_loss(fwd.refined_box, gt.to_array())?;
    let l1 = tape.l1_loss(fwd.refined_box, gt.to_array())?;
    let a = tape.scale(cls, T::from_f64(w.lambda_cls))?;
    let b = tape.scale(giou, T::from_f64(w.lambda_giou))?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, l1)?;
    Ok(LossVars { total, cls, giou, l1 })
}
