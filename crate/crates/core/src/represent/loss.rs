//! Training losses for the three output representations. Each returns the
//! scalar loss and its gradient with respect to the prediction.

use serde::{Deserialize, Serialize};

use super::Repr;
use crate::error::{Error, Result};
use crate::tensornet::{Real, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before BCE.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_tg: f64,
    pub lambda1_rg: f64,
    pub lambda2_rg: f64,
    /// Heatmap Gaussian variance in m².
    pub sigma_sq_hm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_tg: 0.01,
            lambda1_rg: 0.25,
            lambda2_rg: 10.0,
            sigma_sq_hm: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [
            ("lambda_tg", self.lambda_tg),
            ("lambda1_rg", self.lambda1_rg),
            ("lambda2_rg", self.lambda2_rg),
            ("sigma_sq_hm", self.sigma_sq_hm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{f}"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Clamped binary cross-entropy and its derivative in `p`. The derivative is
/// zero where the clamp is active.
fn bce(gt: f64, p: f64) -> (f64, f64) {
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let pc = p.clamp(lo, hi);
    let loss = -gt * pc.ln() - (1.0 - gt) * (1.0 - pc).ln();
    let grad = if p > lo && p < hi {
        -gt / pc + (1.0 - gt) / (1.0 - pc)
    } else {
        0.0
    };
    (loss, grad)
}

fn same_shape<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, context: &str) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(context, gt.shape(), pred.shape()));
    }
    Ok(())
}

/// Weighted BCE over an activity map: active cells at weight 1, inactive at
/// `lambda`. A cell is active when its label is 1.
fn weighted_bce<T: Real>(pred: &[T], gt: &[T], lambda: f64, grad: &mut [T]) -> f64 {
    let mut total = 0.0;
    for ((p, g), d) in pred.iter().zip(gt).zip(grad.iter_mut()) {
        let gt = g.f64();
        let w = if gt >= 1.0 { 1.0 } else { lambda };
        let (l, dl) = bce(gt, p.f64());
        total += w * l;
        *d = T::of(w * dl);
    }
    total
}

pub fn loss_tg<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, lambda: f64) -> Result<(f64, Tensor<T>)> {
    same_shape(pred, gt, "tg loss")?;
    let mut grad = Tensor::zeros(pred.shape());
    let l = weighted_bce(pred.data(), gt.data(), lambda, grad.data_mut());
    Ok((l, grad))
}

/// Sum over cells of squared error divided by the number of cells.
pub fn loss_hm<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    same_shape(pred, gt, "hm loss")?;
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ((p, g), d) in pred.data().iter().zip(gt.data()).zip(grad.data_mut()) {
        let e = p.f64() - g.f64();
        total += e * e / n;
        *d = T::of(2.0 * e / n);
    }
    Ok((total, grad))
}

/// Refined-grid loss on `[3, H, W]` tensors: channel 0 is activity, channels
/// 1 and 2 are the relative offsets `(dx, dy)`. The offset term is restricted
/// to cells whose ground-truth activity is 1.
pub fn loss_rg<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, lambda1: f64, lambda2: f64) -> Result<(f64, Tensor<T>)> {
    same_shape(pred, gt, "rg loss")?;
    if pred.rank() != 3 || pred.shape()[0] != 3 {
        return Err(Error::shape("rg loss", &[3, 0, 0], pred.shape()));
    }
    let plane = pred.shape()[1] * pred.shape()[2];
    let n = plane as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let (p, g) = (pred.data(), gt.data());
    let mut total = weighted_bce(&p[..plane], &g[..plane], lambda1, &mut grad.data_mut()[..plane]);
    for c in 0..plane {
        if g[c].f64() < 1.0 {
            continue;
        }
        for axis in 1..=2 {
            let k = axis * plane + c;
            let e = p[k].f64() - g[k].f64();
            total += lambda2 * e * e / n;
            grad.data_mut()[k] = T::of(lambda2 * 2.0 * e / n);
        }
    }
    Ok((total, grad))
}

/// Mean over the batch of the per-sample loss for `repr`, with the gradient
/// of that mean. Tensors are `[N, C, H, W]`.
pub fn batch_loss<T: Real>(repr: Repr, pred: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<(f64, Tensor<T>)> {
    same_shape(pred, target, "batch loss")?;
    let n = pred.shape()[0];
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let p = pred.index_first(i);
        let g = target.index_first(i);
        let (l, d) = match repr {
            Repr::Tg => loss_tg(&p, &g, cfg.lambda_tg)?,
            Repr::Hm => loss_hm(&p, &g)?,
            Repr::Rg => loss_rg(&p, &g, cfg.lambda1_rg, cfg.lambda2_rg)?,
        };
        total += l;
        grad.extend(d.data().iter().map(|v| T::of(v.f64() * inv_n)));
    }
    Ok((total * inv_n, Tensor::from_vec(pred.shape(), grad)?))
}
