//! End-to-end helpers: image to detections, and scoring a labelled set.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::detect::{decode, merge_scales, Detection};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, GtBox, ImageLabels};
use crate::netgraph::{forward_outputs, NetworkSpec, WeightStore};
use crate::tensor::Tensor;
use crate::train::Sample;

/// Thresholds applied after the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub conf: f64,
    pub nms: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams { conf: 0.25, nms: 0.45 }
    }
}

/// Forward pass, decode every detect tap in input-image pixels, then one NMS pass.
pub fn detect_image(spec: &NetworkSpec, weights: &WeightStore<f32>, image: &Tensor<f32>, params: DetectParams) -> Result<Vec<Detection>> {
    let outputs = forward_outputs(spec, weights, image)?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let scales = spec
        .detect_taps()
        .iter()
        .map(|tap| {
            let raw = outputs.get(&tap.id).ok_or_else(|| Error::Internal(format!("no output for `{}`", tap.id)))?;
            decode(raw, &spec.anchors_for(tap), w, h, params.conf)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_scales(&scales, params.nms))
}

/// Ground truth of a sample as pixel boxes.
pub fn sample_labels(sample: &Sample) -> ImageLabels {
    let (w, h) = (sample.image.width() as f64, sample.image.height() as f64);
    let objects = sample.targets.iter().map(|t| GtBox::new(t.class_id, t.to_rect(w, h))).collect();
    ImageLabels { objects, dont_care: Vec::new() }
}

/// Detect on every sample and score against its own targets.
pub fn evaluate_samples(
    spec: &NetworkSpec,
    weights: &WeightStore<f32>,
    samples: &[Sample],
    params: DetectParams,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut dets = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = format!("{i:06}");
        dets.insert(key.clone(), detect_image(spec, weights, &s.image, params)?);
        labels.insert(key, sample_labels(s));
    }
    evaluate(&dets, &labels, cfg)
}

/// Timing of repeated forward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub iterations: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
}

impl BenchReport {
    pub fn fps(&self) -> f64 {
        1000.0 / self.mean_ms
    }
}

/// Time `iterations` forward passes on a constant image after one warm-up pass.
pub fn bench(spec: &NetworkSpec, weights: &WeightStore<f32>, iterations: usize) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Argument("bench needs at least one iteration".into()));
    }
    let image = Tensor::full(spec.input_shape(), 0.5f32);
    forward_outputs(spec, weights, &image)?;
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        let out = forward_outputs(spec, weights, &image)?;
        times.push(start.elapsed().as_secs_f64() * 1000.0);
        std::hint::black_box(out);
    }
    let mean_ms = times.iter().sum::<f64>() / iterations as f64;
    let min_ms = times.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(BenchReport { iterations, mean_ms, min_ms })
}
