//! YOLOv2-style detection loss over one raw detect map.

use crate::detect::{classes_in, sigmoid, AnchorSet};
use crate::error::{Error, Result};
use crate::eval::{iou, Rect};
use crate::tensor::{Real, Tensor};

/// One ground-truth object, normalised to the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Target {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Target { class_id, cx, cy, w, h }
    }

    /// Box in pixel coordinates of a `width`×`height` image.
    pub fn to_rect(&self, width: f64, height: f64) -> Rect {
        Rect::from_center(self.cx * width, self.cy * height, self.w * width, self.h * height)
    }

    pub fn from_rect(class_id: usize, r: &Rect, width: f64, height: f64) -> Self {
        Target {
            class_id,
            cx: (r.x1 + r.x2) / 2.0 / width,
            cy: (r.y1 + r.y2) / 2.0 / height,
            w: r.width() / width,
            h: r.height() / height,
        }
    }

    /// Positive size and fully inside the unit square (with a little float slack).
    pub fn validate(&self) -> Result<()> {
        const SLACK: f64 = 1e-9;
        let ok = self.w > 0.0
            && self.h > 0.0
            && self.cx - self.w / 2.0 >= -SLACK
            && self.cy - self.h / 2.0 >= -SLACK
            && self.cx + self.w / 2.0 <= 1.0 + SLACK
            && self.cy + self.h / 2.0 <= 1.0 + SLACK;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("target {self:?} is not a positive box inside the image")))
        }
    }
}

/// Relative weight of each loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { coord: 5.0, obj: 1.0, noobj: 0.5, class: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.coord, self.obj, self.noobj, self.class].iter().all(|&l| l >= 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(Error::Argument(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// The anchor slot responsible for one target, with its regression targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub cell_y: usize,
    pub cell_x: usize,
    pub anchor: usize,
    pub class_id: usize,
    /// Offset of the centre inside the cell, the target for σ(tx).
    pub tx: f64,
    pub ty: f64,
    /// Log size ratio to the prior, the target for tw.
    pub tw: f64,
    pub th: f64,
    /// IoU of the current prediction with the target, the objectness target.
    pub iou: f64,
}

fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

/// Pick the responsible cell and anchor for each target and freeze the
/// objectness targets against the current prediction.
///
/// When two targets land on the same cell and anchor the first one keeps it.
pub fn assign_targets<T: Real>(raw: &Tensor<T>, targets: &[Target], anchors: &AnchorSet) -> Result<Vec<Assignment>> {
    let b = anchors.len();
    let classes = classes_in(raw.channels(), b)?;
    let stride = 5 + classes;
    let (gh, gw) = (raw.height() as f64, raw.width() as f64);
    let predicted = |a: usize, i: usize, j: usize| {
        let (pw, ph) = anchors.priors()[a];
        let v = |k: usize| raw.at(a * stride + k, i, j).to_f64().unwrap();
        Rect::from_center(sigmoid(v(0)) + j as f64, sigmoid(v(1)) + i as f64, pw * v(2).exp(), ph * v(3).exp())
    };
    let mut out: Vec<Assignment> = Vec::with_capacity(targets.len());
    for t in targets {
        t.validate()?;
        if t.class_id >= classes {
            return Err(Error::Argument(format!("target class {} but the detect map has {classes} classes", t.class_id)));
        }
        let cell_x = ((t.cx * gw).floor() as usize).min(raw.width() - 1);
        let cell_y = ((t.cy * gh).floor() as usize).min(raw.height() - 1);
        let (bw, bh) = (t.w * gw, t.h * gh);
        let mut anchor = 0;
        let mut best = f64::NEG_INFINITY;
        for (a, &(pw, ph)) in anchors.priors().iter().enumerate() {
            let s = shape_iou(bw, bh, pw, ph);
            if s > best {
                best = s;
                anchor = a;
            }
        }
        if out.iter().any(|o| (o.cell_y, o.cell_x, o.anchor) == (cell_y, cell_x, anchor)) {
            continue;
        }
        let (pw, ph) = anchors.priors()[anchor];
        let truth = Rect::from_center(t.cx * gw, t.cy * gh, bw, bh);
        out.push(Assignment {
            cell_y,
            cell_x,
            anchor,
            class_id: t.class_id,
            tx: t.cx * gw - cell_x as f64,
            ty: t.cy * gh - cell_y as f64,
            tw: (bw / pw).ln(),
            th: (bh / ph).ln(),
            iou: iou(&predicted(anchor, cell_y, cell_x), &truth),
        });
    }
    Ok(out)
}

/// KL divergence of sigmoid(z) from target t, and its derivative in z.
fn objectness_term(z: f64, t: f64) -> (f64, f64) {
    // ln sigmoid(z) and ln(1 - sigmoid(z)) without overflow.
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let loss = xlogx(t) + xlogx(1.0 - t) - t * log_p - (1.0 - t) * log_q;
    (loss.max(0.0), sigmoid(z) - t)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss and its gradient with respect to `raw` for fixed assignments.
pub fn loss_for_assignments<T: Real>(raw: &Tensor<T>, assignments: &[Assignment], boxes: usize, lw: &LossWeights) -> Result<(f64, Tensor<T>)> {
    lw.validate()?;
    let classes = classes_in(raw.channels(), boxes)?;
    let stride = 5 + classes;
    let mut grad = Tensor::<T>::zeros(raw.shape());
    let mut loss = 0.0;
    let v = |ch: usize, i: usize, j: usize| raw.at(ch, i, j).to_f64().unwrap();

    let mut responsible = vec![false; boxes * raw.height() * raw.width()];
    for a in assignments {
        responsible[(a.anchor * raw.height() + a.cell_y) * raw.width() + a.cell_x] = true;
    }
    for a in 0..boxes {
        let ch = a * stride + 4;
        for i in 0..raw.height() {
            for j in 0..raw.width() {
                if responsible[(a * raw.height() + i) * raw.width() + j] {
                    continue;
                }
                let (l, g) = objectness_term(v(ch, i, j), 0.0);
                loss += lw.noobj * l;
                grad.set(ch, i, j, T::lit(lw.noobj * g));
            }
        }
    }

    let mut logits = vec![0.0; classes];
    for asg in assignments {
        let (i, j) = (asg.cell_y, asg.cell_x);
        let base = asg.anchor * stride;
        for (k, target) in [(0, asg.tx), (1, asg.ty)] {
            let s = sigmoid(v(base + k, i, j));
            loss += lw.coord * (s - target) * (s - target);
            grad.set(base + k, i, j, T::lit(lw.coord * 2.0 * (s - target) * s * (1.0 - s)));
        }
        for (k, target) in [(2, asg.tw), (3, asg.th)] {
            let d = v(base + k, i, j) - target;
            loss += lw.coord * d * d;
            grad.set(base + k, i, j, T::lit(lw.coord * 2.0 * d));
        }
        let (l, g) = objectness_term(v(base + 4, i, j), asg.iou);
        loss += lw.obj * l;
        grad.set(base + 4, i, j, T::lit(lw.obj * g));

        for (k, l) in logits.iter_mut().enumerate() {
            *l = v(base + 5 + k, i, j);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        loss += lw.class * (denom.ln() + max - logits[asg.class_id]);
        for k in 0..classes {
            let p = (logits[k] - max).exp() / denom;
            let onehot = if k == asg.class_id { 1.0 } else { 0.0 };
            grad.set(base + 5 + k, i, j, T::lit(lw.class * (p - onehot)));
        }
    }
    Ok((loss, grad))
}

/// Assign targets against the current prediction, then evaluate the loss.
pub fn yolo_loss<T: Real>(raw: &Tensor<T>, targets: &[Target], anchors: &AnchorSet, lw: &LossWeights) -> Result<(f64, Tensor<T>)> {
    let assignments = assign_targets(raw, targets, anchors)?;
    loss_for_assignments(raw, &assignments, anchors.len(), lw)
}
