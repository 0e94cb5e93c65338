//! Turning raw detect-layer maps into boxes.
//!
//! A detect layer with `B` anchors and `C` classes emits `B·(5 + C)` channels.
//! Anchor `b` owns the contiguous block `b·(5 + C) ..`, holding
//! `tx, ty, tw, th, to` followed by `C` class logits. Decoding follows the
//! YOLOv2 parameterisation: sigmoid offsets inside the cell, exponential
//! scaling of the anchor prior, sigmoid objectness times the softmax class
//! probability.

use std::cmp::Ordering;

use crate::error::{config_err, Result};
use crate::eval::{iou, Rect};
use crate::tensor::{Real, Tensor};

/// Anchor priors as (width, height) in grid cells of the coarsest detection grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    priors: Vec<(f64, f64)>,
}

impl AnchorSet {
    /// Defaults spanning tall pedestrians to wide nearby cars.
    pub const DEFAULT_PRIORS: [(f64, f64); 5] = [(0.6, 1.4), (1.2, 1.0), (2.2, 1.8), (4.5, 3.0), (8.0, 5.0)];

    pub fn new(priors: Vec<(f64, f64)>) -> Result<Self> {
        if priors.is_empty() {
            return Err(config_err!("an anchor set needs at least one prior"));
        }
        if priors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
            return Err(config_err!("anchor priors must be finite and strictly positive"));
        }
        Ok(AnchorSet { priors })
    }

    /// `boxes` priors drawn from [`Self::DEFAULT_PRIORS`], spread evenly over the list.
    pub fn default_for(boxes: usize) -> Result<Self> {
        if boxes == 0 {
            return Err(config_err!("an anchor set needs at least one prior"));
        }
        let n = Self::DEFAULT_PRIORS.len();
        Self::new((0..boxes).map(|i| Self::DEFAULT_PRIORS[(i * n / boxes).min(n - 1)]).collect())
    }

    pub fn priors(&self) -> &[(f64, f64)] {
        &self.priors
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// Priors re-expressed in cells of a grid `factor` times finer.
    pub fn scaled(&self, factor: f64) -> AnchorSet {
        AnchorSet { priors: self.priors.iter().map(|&(w, h)| (w * factor, h * factor)).collect() }
    }
}

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet { priors: Self::DEFAULT_PRIORS.to_vec() }
    }
}

/// A decoded box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Rect,
    pub class_id: usize,
    pub score: f64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Number of classes encoded by a detect map with `channels` channels and `boxes` anchors.
pub fn classes_in(channels: usize, boxes: usize) -> Result<usize> {
    if boxes == 0 || channels % boxes != 0 || channels / boxes <= 5 {
        return Err(config_err!("{channels} detect channels do not split into {boxes} anchors of 5 + C values"));
    }
    Ok(channels / boxes - 5)
}

/// Decode every cell and anchor of a raw detect map, keeping scores `≥ conf_thresh`.
///
/// `anchors` must already be expressed in cells of this map's grid.
pub fn decode<T: Real>(
    raw: &Tensor<T>,
    anchors: &AnchorSet,
    img_w: f64,
    img_h: f64,
    conf_thresh: f64,
) -> Result<Vec<Detection>> {
    let b = anchors.len();
    let classes = classes_in(raw.channels(), b)?;
    let (sh, sw) = (raw.height(), raw.width());
    let stride = 5 + classes;
    let value = |ch: usize, i: usize, j: usize| raw.at(ch, i, j).to_f64().unwrap_or(f64::NAN);
    let mut out = Vec::new();
    let mut logits = vec![0.0; classes];
    for cy in 0..sh {
        for cx in 0..sw {
            for (a, &(pw, ph)) in anchors.priors().iter().enumerate() {
                let base = a * stride;
                let objectness = sigmoid(value(base + 4, cy, cx));
                // Class probabilities never exceed 1, so this bound skips the softmax for empty cells.
                if objectness < conf_thresh {
                    continue;
                }
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = value(base + 5 + k, cy, cx);
                }
                let (class_id, prob) = softmax_argmax(&logits);
                let score = objectness * prob;
                if score < conf_thresh {
                    continue;
                }
                let center_x = (sigmoid(value(base, cy, cx)) + cx as f64) / sw as f64 * img_w;
                let center_y = (sigmoid(value(base + 1, cy, cx)) + cy as f64) / sh as f64 * img_h;
                let w = pw * value(base + 2, cy, cx).exp() / sw as f64 * img_w;
                let h = ph * value(base + 3, cy, cx).exp() / sh as f64 * img_h;
                let bbox = Rect::from_center(center_x, center_y, w, h).clip(img_w, img_h);
                if bbox.is_degenerate() {
                    continue;
                }
                out.push(Detection { bbox, class_id, score });
            }
        }
    }
    Ok(out)
}

/// Index and probability of the largest softmax entry; ties go to the lowest index.
fn softmax_argmax(logits: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    let max = logits[best];
    let denom: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    (best, 1.0 / denom)
}

/// Total order used for ranking: score descending, then class, then coordinates.
pub(crate) fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Greedy per-class non-maximum suppression.
///
/// Output is sorted by descending score. A box is dropped when it overlaps a
/// higher-ranked survivor of the same class with IoU above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept.iter().any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// One suppression pass over detections gathered from several scales.
pub fn merge_scales(scales: &[Vec<Detection>], iou_thresh: f64) -> Vec<Detection> {
    let all: Vec<Detection> = scales.iter().flatten().copied().collect();
    nms(&all, iou_thresh)
}

/// Objectness per grid cell, the max over anchors of `σ(to)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Nearest-neighbour enlargement to `height × width`.
    pub fn upscale(&self, height: usize, width: usize) -> Heatmap {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let i = y * self.height / height;
            for x in 0..width {
                values.push(self.at(i, x * self.width / width));
            }
        }
        Heatmap { height, width, values }
    }

    /// Gray levels 0–255, rounding to nearest.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

pub fn objectness_heatmap<T: Real>(raw: &Tensor<T>, anchors: &AnchorSet) -> Result<Heatmap> {
    let classes = classes_in(raw.channels(), anchors.len())?;
    let (sh, sw) = (raw.height(), raw.width());
    let mut values = vec![0.0f64; sh * sw];
    for a in 0..anchors.len() {
        let ch = raw.channel(a * (5 + classes) + 4);
        for (v, t) in values.iter_mut().zip(ch) {
            *v = v.max(sigmoid(t.to_f64().unwrap_or(f64::NAN)));
        }
    }
    Ok(Heatmap { height: sh, width: sw, values })
}
