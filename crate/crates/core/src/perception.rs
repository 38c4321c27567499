//! Max fusion, the dense detection head, box decoding, NMS and AP.

use crate::error::{Error, Result};
use crate::nn::layers::sigmoid;
use crate::nn::{Conv2d, ConvSpec, Grads, Layer, Mode, ParamStore, Tensor};
use crate::scene::BBox;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Per-cell head outputs: objectness logit, dx, dy, ln w, ln h.
pub const HEAD_OUTPUTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub fusion_kernel: usize,
    /// Bound on predicted log extents before exponentiation.
    pub max_log_size: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            score_threshold: 0.1,
            nms_iou: 0.5,
            fusion_kernel: 3,
            max_log_size: 3.0,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Element-wise max over ego and collaborators, then conv + ReLU.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    /// Winning source per element; 0 is the ego map.
    argmax: Vec<u8>,
    sources: usize,
    maxed: Tensor,
    pre: Tensor,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Fusion {
            conv: Conv2d::new(
                store,
                name,
                ConvSpec::new(channels, channels, (kernel, kernel)).same(),
                rng,
            )?,
        })
    }

    /// All inputs are `[N, H, W, C]`. Ties go to the earliest source.
    pub fn forward_train(
        &self,
        store: &ParamStore,
        ego: &Tensor,
        collab: &[&Tensor],
    ) -> Result<(Tensor, FusionCache)> {
        if collab.len() >= u8::MAX as usize {
            return Err(Error::contract("too many collaborators"));
        }
        let mut maxed = ego.data().to_vec();
        let mut argmax = vec![0u8; maxed.len()];
        for (s, m) in collab.iter().enumerate() {
            if m.shape() != ego.shape() {
                return Err(Error::shape("fuse", ego.shape(), m.shape()));
            }
            for ((acc, arg), &v) in maxed.iter_mut().zip(argmax.iter_mut()).zip(m.data()) {
                if v > *acc {
                    *acc = v;
                    *arg = s as u8 + 1;
                }
            }
        }
        let maxed = Tensor::new(ego.shape(), maxed)?;
        let pre = self.conv.forward(store, &maxed)?;
        let out = pre.map(|v| v.max(0.0));
        Ok((
            out,
            FusionCache {
                argmax,
                sources: collab.len() + 1,
                maxed,
                pre,
            },
        ))
    }

    pub fn forward(&self, store: &ParamStore, ego: &Tensor, collab: &[&Tensor]) -> Result<Tensor> {
        Ok(self.forward_train(store, ego, collab)?.0)
    }

    /// Returns one gradient per source, ego first.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &FusionCache,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Vec<Tensor>> {
        let g_pre = Layer::Relu.backward(store, &cache.pre, grad_out, Mode::Eval, grads)?;
        let g_max = self.conv.backward(store, &cache.maxed, &g_pre, grads)?;
        let mut out = vec![vec![0.0; g_max.numel()]; cache.sources];
        for (i, (&a, &g)) in cache.argmax.iter().zip(g_max.data()).enumerate() {
            out[a as usize][i] = g;
        }
        out.into_iter()
            .map(|d| Tensor::new(g_max.shape(), d))
            .collect()
    }
}

/// 1x1 conv `C -> 5`.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub conv: Conv2d,
}

impl DetectionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DetectionHead {
            conv: Conv2d::new(
                store,
                name,
                ConvSpec::new(channels, HEAD_OUTPUTS, (1, 1)),
                rng,
            )?,
        })
    }

    pub fn forward(&self, store: &ParamStore, fused: &Tensor) -> Result<Tensor> {
        self.conv.forward(store, fused)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        fused: &Tensor,
        grad_out: &Tensor,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        self.conv.backward(store, fused, grad_out, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// One line per box: `score cx cy w h`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for d in &self.detections {
            let _ = writeln!(
                s,
                "{:.6} {:.6} {:.6} {:.6} {:.6}",
                d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
            );
        }
        s
    }
}

/// Box implied by a cell's regression outputs.
pub fn decode_cell(row: usize, col: usize, reg: &[f64], max_log_size: f64) -> BBox {
    let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
    BBox::new(
        px + reg[0],
        py + reg[1],
        reg[2].clamp(-max_log_size, max_log_size).exp(),
        reg[3].clamp(-max_log_size, max_log_size).exp(),
    )
}

/// Greedy NMS: keeps boxes in score order unless they overlap a kept box by
/// more than `iou_thr`.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_thr) {
            kept.push(d);
        }
    }
    kept
}

/// Decodes one `[H, W, 5]` head output into scored boxes.
pub fn detect(raw: &Tensor, cfg: &PerceptionConfig) -> Result<DetectionSet> {
    let &[h, w, k] = raw.shape() else {
        return Err(Error::shape("detect", "[H, W, 5]", raw.shape()));
    };
    if k != HEAD_OUTPUTS {
        return Err(Error::shape("detect", "[H, W, 5]", raw.shape()));
    }
    let mut dets = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let cell = &raw.data()[(row * w + col) * k..][..k];
            let score = sigmoid(cell[0]);
            if score > cfg.score_threshold {
                dets.push(Detection {
                    bbox: decode_cell(row, col, &cell[1..], cfg.max_log_size),
                    score,
                });
            }
        }
    }
    Ok(DetectionSet {
        detections: nms(dets, cfg.nms_iou),
    })
}

/// All-point interpolated AP with greedy score-descending matching.
///
/// With no ground truth the AP is 1 when there are also no detections and
/// 0 otherwise.
pub fn average_precision(dets: &DetectionSet, gt: &[BBox], iou_thr: f64) -> f64 {
    if gt.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<&Detection> = dets.detections.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut matched = vec![false; gt.len()];
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    for (i, d) in order.iter().enumerate() {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, _)| !matched[*j])
            .map(|(j, g)| (j, d.bbox.iou(g)))
            .filter(|&(_, v)| v >= iou_thr)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            matched[j] = true;
            tp += 1;
        }
        points.push((tp as f64 / gt.len() as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (recall, _) = points[i];
        if recall > prev_recall {
            let p = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * p;
            prev_recall = recall;
        }
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn hand_computed_pr_curve() {
        let gt = [
            BBox::new(2.0, 2.0, 2.0, 2.0),
            BBox::new(10.0, 10.0, 2.0, 2.0),
        ];
        let dets = DetectionSet {
            detections: vec![
                det(gt[0], 0.9),
                det(BBox::new(20.0, 20.0, 2.0, 2.0), 0.8),
                det(gt[1], 0.7),
            ],
        };
        assert!((average_precision(&dets, &gt, 0.5) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn vacuous_cases() {
        assert_eq!(average_precision(&DetectionSet::default(), &[], 0.5), 1.0);
        let gt = [BBox::new(2.0, 2.0, 2.0, 2.0)];
        assert_eq!(average_precision(&DetectionSet::default(), &gt, 0.5), 0.0);
    }

    #[test]
    fn nms_drops_weaker_overlap() {
        let a = BBox::new(5.0, 5.0, 2.0, 2.0);
        let b = BBox::new(5.05, 5.0, 2.0, 2.0);
        assert!(a.iou(&b) > 0.9);
        let kept = nms(vec![det(b, 0.8), det(a, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }
}
