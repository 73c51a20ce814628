//! Combined segmentation/classification loss with per-epoch mixing.

mod weights;

pub use weights::{compute_weight_mask, distance_to_negative, label_regions, WeightMask, WeightParams};

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixing factor used when dynamic balancing is off: both losses stay active.
pub const STATIC_LAMBDA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule {
    pub total_epochs: usize,
    pub delta: f64,
    pub dynamic_enabled: bool,
}

impl MixSchedule {
    pub fn new(total_epochs: usize, delta: f64, dynamic_enabled: bool) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::Config("schedule needs total_epochs >= 1".into()));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::Config(format!("delta must be a non-negative number (got {delta})")));
        }
        Ok(Self { total_epochs, delta, dynamic_enabled })
    }
}

/// Segmentation weight for epoch `epoch`: `1 - n / total` when dynamic,
/// otherwise [`STATIC_LAMBDA`].
pub fn lambda_at(epoch: usize, schedule: &MixSchedule) -> Result<f64> {
    if epoch > schedule.total_epochs {
        return Err(Error::Schedule { epoch, total: schedule.total_epochs });
    }
    if schedule.dynamic_enabled {
        Ok(1.0 - epoch as f64 / schedule.total_epochs as f64)
    } else {
        Ok(STATIC_LAMBDA)
    }
}

/// `lambda * seg + delta * (1 - lambda) * cls`
pub fn total_loss(seg_loss: f64, cls_loss: f64, lambda: f64, delta: f64) -> Result<f64> {
    if !(seg_loss.is_finite() && cls_loss.is_finite()) {
        return Err(Error::NonFinite { epoch: 0, step: 0, seg_loss, cls_loss });
    }
    check_mix(lambda, delta)?;
    Ok(lambda * seg_loss + delta * (1.0 - lambda) * cls_loss)
}

fn check_mix(lambda: f64, delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1] (got {lambda})")));
    }
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::Config(format!("delta must be a non-negative number (got {delta})")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_loss: f64,
    pub cls_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(seg_loss: f64, cls_loss: f64, lambda: f64, delta: f64) -> Result<Self> {
        let total = total_loss(seg_loss, cls_loss, lambda, delta)?;
        Ok(Self { seg_loss, cls_loss, lambda, total })
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against `target`, computed
/// without forming the sigmoid.
pub fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

pub fn classification_loss(cls_logit: f64, label: bool) -> f64 {
    bce_with_logit(cls_logit, if label { 1.0 } else { 0.0 })
}

/// Mean over all pixels of `weight * bce(sigmoid(logit), target)`.
pub fn segmentation_loss(seg_output_map: &Array2<f32>, target_mask: &Array2<u8>, weight_mask: &WeightMask) -> Result<f64> {
    let shape = seg_output_map.dim();
    if target_mask.dim() != shape || weight_mask.weights.dim() != shape {
        return Err(Error::Shape(format!(
            "segmentation loss: logits {:?}, target {:?}, weights {:?}",
            shape,
            target_mask.dim(),
            weight_mask.weights.dim()
        )));
    }
    let n = seg_output_map.len();
    if n == 0 {
        return Err(Error::Shape("segmentation loss over an empty map".into()));
    }
    let sum: f64 = seg_output_map
        .iter()
        .zip(target_mask.iter())
        .zip(weight_mask.weights.iter())
        .map(|((&x, &t), &w)| w as f64 * bce_with_logit(x as f64, if t != 0 { 1.0 } else { 0.0 }))
        .sum();
    Ok(sum / n as f64)
}

/// Elementwise BCE-with-logits on tensors of equal shape.
pub fn bce_with_logits_tensor(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus_tail = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * targets)?)? + softplus_tail)?)
}

/// Weighted segmentation loss for a (N, 1, h, w) logit map, averaged over
/// every pixel of every sample.
pub fn segmentation_loss_tensor(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() || logits.dims() != weights.dims() {
        return Err(Error::Shape(format!(
            "segmentation loss: logits {:?}, target {:?}, weights {:?}",
            logits.dims(),
            targets.dims(),
            weights.dims()
        )));
    }
    Ok((bce_with_logits_tensor(logits, targets)? * weights)?.mean_all()?)
}

/// Mean classification BCE over a batch of (N,) logits.
pub fn classification_loss_tensor(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok(bce_with_logits_tensor(logits, labels)?.mean_all()?)
}

/// `lambda * seg + delta * (1 - lambda) * cls` on scalar tensors.
pub fn total_loss_tensor(seg: &Tensor, cls: &Tensor, lambda: f64, delta: f64) -> Result<Tensor> {
    check_mix(lambda, delta)?;
    Ok((seg.affine(lambda, 0.0)? + cls.affine(delta * (1.0 - lambda), 0.0)?)?)
}
