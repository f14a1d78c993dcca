//! Training objectives: the gaze-alignment MSE, Dice + cross-entropy
//! segmentation loss, and their λ-weighted combination.

use serde::{Deserialize, Serialize};

use crate::ndnet::{Backend, ClassTarget, DiceCeSpec, TensorError};

/// Default weight of the gaze term.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Scalar loss values for one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_gaze: f64,
    pub l_gt: f64,
    pub l_pse: f64,
    pub l_seg: f64,
    pub l_all: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_gaze, self.l_gt, self.l_pse, self.l_seg, self.l_all]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean over every element of `(g_net - g_human)²`.
pub fn gaze_loss<B: Backend>(
    b: &mut B,
    g_net: &B::Value,
    g_human: &B::Value,
) -> Result<B::Value, TensorError> {
    b.mse_mean(g_net, g_human)
}

/// Equal-weight soft Dice (ε = 1e-5, averaged over all classes) plus mean
/// cross-entropy. Masked-out pixels take no part in either term; an empty
/// selection scores 0.
pub fn dice_ce_loss<B: Backend>(
    b: &mut B,
    logits: &B::Value,
    target: &ClassTarget,
) -> Result<B::Value, TensorError> {
    b.dice_ce(logits, target, DiceCeSpec::default())
}

/// `l_seg = (l_gt + l_pse) / 2`, `l_all = l_seg + λ·l_gaze`.
pub fn total_loss(l_gt: f64, l_pse: f64, l_gaze: f64, lambda: f64) -> LossReport {
    let l_seg = (l_gt + l_pse) * 0.5;
    LossReport {
        l_gaze,
        l_gt,
        l_pse,
        l_seg,
        l_all: l_seg + lambda * l_gaze,
        lambda,
    }
}

/// Recorded counterpart of [`total_loss`], built from the same operations
/// in the same order so both agree bit for bit.
pub fn total_loss_node<B: Backend>(
    b: &mut B,
    l_gt: &B::Value,
    l_pse: &B::Value,
    l_gaze: Option<&B::Value>,
    lambda: f64,
) -> Result<B::Value, TensorError> {
    let sum = b.add(l_gt, l_pse)?;
    let l_seg = b.scale(&sum, 0.5);
    match l_gaze {
        Some(g) if lambda != 0.0 => {
            let weighted = b.scale(g, lambda);
            b.add(&l_seg, &weighted)
        }
        _ => Ok(l_seg),
    }
}
