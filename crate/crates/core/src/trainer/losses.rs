//! Detection losses and their gradients with respect to the head output.

use crate::error::{Error, Result};
use crate::nn::layers::sigmoid;
use crate::nn::Tensor;
use crate::perception::HEAD_OUTPUTS;
use crate::scene::Targets;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_DELTA: f64 = 1.0;

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn focal_cell(z: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if y > 0.5 {
        let q = 1.0 - p;
        let ln_p = -softplus(-z);
        let loss = -FOCAL_ALPHA * q.powf(FOCAL_GAMMA) * ln_p;
        let grad = FOCAL_ALPHA
            * (FOCAL_GAMMA * p * q.powf(FOCAL_GAMMA) * ln_p - q.powf(FOCAL_GAMMA + 1.0));
        (loss, grad)
    } else {
        let q = 1.0 - p;
        let ln_q = -softplus(z);
        let a = 1.0 - FOCAL_ALPHA;
        let loss = -a * p.powf(FOCAL_GAMMA) * ln_q;
        let grad = a * (p.powf(FOCAL_GAMMA + 1.0) - FOCAL_GAMMA * p.powf(FOCAL_GAMMA) * q * ln_q);
        (loss, grad)
    }
}

/// Sigmoid focal loss, mean over cells.
pub fn focal_cls_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    Ok(focal_cls(logits, targets)?.0)
}

/// Loss and its gradient with respect to each logit.
pub fn focal_cls(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape("focal_cls_loss", targets.len(), logits.len()));
    }
    if logits.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let (l, g) = focal_cell(z, y);
            total += l;
            g / n
        })
        .collect();
    Ok((total / n, grad))
}

fn smooth_l1(e: f64) -> (f64, f64) {
    if e.abs() < SMOOTH_L1_DELTA {
        (0.5 * e * e / SMOOTH_L1_DELTA, e / SMOOTH_L1_DELTA)
    } else {
        (e.abs() - 0.5 * SMOOTH_L1_DELTA, e.signum())
    }
}

/// Smooth-L1 averaged over positive cells and the four regression outputs.
/// An empty mask gives zero.
pub fn smooth_l1_reg_loss(pred: &[[f64; 4]], target: &[[f64; 4]], mask: &[bool]) -> Result<f64> {
    Ok(smooth_l1_reg(pred, target, mask)?.0)
}

pub fn smooth_l1_reg(
    pred: &[[f64; 4]],
    target: &[[f64; 4]],
    mask: &[bool],
) -> Result<(f64, Vec<[f64; 4]>)> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape(
            "smooth_l1_reg_loss",
            target.len(),
            (pred.len(), mask.len()),
        ));
    }
    let positives = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![[0.0; 4]; pred.len()];
    if positives == 0 {
        return Ok((0.0, grad));
    }
    let denom = (positives * 4) as f64;
    let mut total = 0.0;
    for i in (0..pred.len()).filter(|&i| mask[i]) {
        for d in 0..4 {
            let (l, g) = smooth_l1(pred[i][d] - target[i][d]);
            total += l;
            grad[i][d] = g / denom;
        }
    }
    Ok((total / denom, grad))
}

/// Classification and regression losses of one raw head output
/// (`[H, W, 5]` or `[1, H, W, 5]`), with the gradient of
/// `cls + reg_weight * reg` in the same shape.
pub fn detection_loss(
    raw: &Tensor,
    targets: &Targets,
    reg_weight: f64,
) -> Result<(f64, f64, Tensor)> {
    let cells = targets.height * targets.width;
    if raw.numel() != cells * HEAD_OUTPUTS || raw.last_dim() != HEAD_OUTPUTS {
        return Err(Error::shape(
            "detection_loss",
            [targets.height, targets.width, HEAD_OUTPUTS],
            raw.shape(),
        ));
    }
    let d = raw.data();
    let logits: Vec<f64> = (0..cells).map(|i| d[i * HEAD_OUTPUTS]).collect();
    let pred: Vec<[f64; 4]> = (0..cells)
        .map(|i| {
            let r = &d[i * HEAD_OUTPUTS + 1..(i + 1) * HEAD_OUTPUTS];
            [r[0], r[1], r[2], r[3]]
        })
        .collect();
    let mask: Vec<bool> = targets.objectness.iter().map(|&o| o > 0.5).collect();
    let (cls, g_cls) = focal_cls(&logits, &targets.objectness)?;
    let (reg, g_reg) = smooth_l1_reg(&pred, &targets.regression, &mask)?;
    let mut g = vec![0.0; raw.numel()];
    for i in 0..cells {
        g[i * HEAD_OUTPUTS] = g_cls[i];
        for d in 0..4 {
            g[i * HEAD_OUTPUTS + 1 + d] = reg_weight * g_reg[i][d];
        }
    }
    Ok((cls, reg, Tensor::new(raw.shape(), g)?))
}
