//! Training: loss, reverse-mode gradients, SGD with momentum and the step schedule.

mod adjoint;
mod augment;
mod loss;
mod tape;

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netgraph::{NetworkSpec, WeightStore};
use crate::tensor::{Real, Tensor};

pub use adjoint::{
    batchnorm_infer_backward, batchnorm_train, batchnorm_train_backward, conv2d_backward, maxpool2x2_backward, relu_backward,
    upsample2x_backward, BnBatchCache, ConvGrads,
};
pub use augment::{apply_jitter, augment, hsv_to_rgb, rgb_to_hsv, Jitter};
pub use loss::{assign_targets, loss_for_assignments, yolo_loss, Assignment, LossWeights, Target};
pub use tape::{backward, calibrate_batchnorm, flatten_trainables, forward_train, unflatten_trainables, BnMode, Tape};

/// An image in `[0, 1]` with its normalised targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub targets: Vec<Target>,
}

/// Optimiser settings and the step learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
    pub lr_drops: Vec<usize>,
    pub drop_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            total_epochs: 160,
            lr_drops: vec![60, 90],
            drop_factor: 0.1,
        }
    }
}

impl SgdConfig {
    /// Same recipe stretched or squeezed to `total_epochs`, drop epochs scaled proportionally.
    pub fn scaled_to(&self, total_epochs: usize) -> SgdConfig {
        let lr_drops = self.lr_drops.iter().map(|&d| d * total_epochs / self.total_epochs).collect();
        SgdConfig { total_epochs, lr_drops, ..self.clone() }
    }

    /// The recipe on a data set of `images` images, run for `total_epochs`, with
    /// each drop after the same number of SGD steps it takes on `reference_images`.
    pub fn step_matched(&self, images: usize, reference_images: usize, total_epochs: usize) -> SgdConfig {
        let steps = |n: usize| n.div_ceil(self.batch_size.max(1)).max(1);
        let (here, there) = (steps(images), steps(reference_images));
        let lr_drops = self.lr_drops.iter().map(|&d| (d * there).div_ceil(here)).collect();
        SgdConfig { total_epochs, lr_drops, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Argument(format!("base learning rate must be non-negative, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Argument(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::Argument("batch size and epoch count must be positive".into()));
        }
        Ok(())
    }
}

/// Training images in the KITTI train/validation split the recipe was run on.
pub const KITTI_TRAIN_IMAGES: usize = 3712;

/// Learning rate in effect during `epoch` (counted from 0).
pub fn lr_at(epoch: usize, cfg: &SgdConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Argument(format!("epoch {epoch} is past the last epoch {}", cfg.total_epochs - 1)));
    }
    let drops = cfg.lr_drops.iter().filter(|&&d| epoch >= d).count();
    Ok(cfg.base_lr * cfg.drop_factor.powi(drops as i32))
}

/// Momentum buffers, one per trainable slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity<T = f32> {
    slices: Vec<Vec<T>>,
}

impl<T: Real> Velocity<T> {
    pub fn zeros(weights: &WeightStore<T>) -> Self {
        Velocity { slices: weights.trainable_slices().iter().map(|s| vec![T::zero(); s.len()]).collect() }
    }

    pub fn slices(&self) -> &[Vec<T>] {
        &self.slices
    }
}

/// `v ← m·v − lr·(g + wd·w)`, then `w ← w + v`, for every trainable value.
pub fn sgd_step<T: Real>(
    weights: &mut WeightStore<T>,
    grads: &WeightStore<T>,
    velocity: &mut Velocity<T>,
    cfg: &SgdConfig,
    epoch: usize,
) -> Result<()> {
    let lr = T::lit(lr_at(epoch, cfg)?);
    sgd_update(weights, grads, velocity, lr, T::lit(cfg.momentum), T::lit(cfg.weight_decay))
}

fn sgd_update<T: Real>(weights: &mut WeightStore<T>, grads: &WeightStore<T>, velocity: &mut Velocity<T>, lr: T, m: T, wd: T) -> Result<()> {
    let g = grads.trainable_slices();
    let mut w = weights.trainable_slices_mut();
    if g.len() != w.len() || velocity.slices.len() != w.len() || g.iter().zip(&w).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Argument("gradients, velocity and weights have different layouts".into()));
    }
    for ((ws, gs), vs) in w.iter_mut().zip(g).zip(&mut velocity.slices) {
        for ((wv, &gv), vv) in ws.iter_mut().zip(gs).zip(vs.iter_mut()) {
            *vv = m * *vv - lr * (gv + wd * *wv);
            *wv = *wv + *vv;
        }
    }
    Ok(())
}

/// One line of the loss log: `iter epoch lr loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.4e} {:.6}", self.iteration, self.epoch, self.lr, self.loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub loss: LossWeights,
    pub seed: u64,
    pub augment: bool,
    /// Checkpoint callback period in epochs; 0 disables it.
    pub checkpoint_every: usize,
    /// Recompute batch-norm running statistics over the training images at the end.
    pub calibrate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { sgd: SgdConfig::default(), loss: LossWeights::default(), seed: 0, augment: true, checkpoint_every: 0, calibrate: true }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: WeightStore<f32>,
    pub log: Vec<LossRecord>,
}

/// Loss of a batch (mean over samples, summed over detect taps) and the
/// gradient with respect to every detect output.
pub fn batch_loss<T: Real>(
    spec: &NetworkSpec,
    tape: &Tape<T>,
    targets: &[&[Target]],
    lw: &LossWeights,
) -> Result<(f64, HashMap<String, Vec<Tensor<T>>>)> {
    let n = tape.batch_len();
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grads = HashMap::new();
    for tap in spec.detect_taps() {
        let anchors = spec.anchors_for(&tap);
        let outputs = tape.output(spec, &tap.id).ok_or_else(|| Error::Internal(format!("no output recorded for `{}`", tap.id)))?;
        let mut per_sample = Vec::with_capacity(n);
        for (raw, t) in outputs.iter().zip(targets) {
            let (loss, grad) = yolo_loss(raw, t, &anchors, lw)?;
            total += loss * scale;
            per_sample.push(grad.map(|g| g * T::lit(scale)));
        }
        grads.insert(tap.id.clone(), per_sample);
    }
    Ok((total, grads))
}

/// Train from `init` on `data` with the given recipe.
pub fn train(spec: &NetworkSpec, init: WeightStore<f32>, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(spec, init, data, cfg, |_, _| Ok(()), |_| {})
}

/// [`train`] with a checkpoint callback (epoch number counted from 1, calibrated
/// weights) and a per-iteration log callback.
pub fn train_with(
    spec: &NetworkSpec,
    init: WeightStore<f32>,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &WeightStore<f32>) -> Result<()>,
    mut on_iteration: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.sgd.validate()?;
    cfg.loss.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training needs at least one sample".into()));
    }
    init.validate(spec)?;
    for s in data {
        if s.image.shape() != spec.input_shape() {
            return Err(Error::Argument(format!("sample image {} does not match network input {}", s.image.shape(), spec.input_shape())));
        }
        s.targets.iter().try_for_each(Target::validate)?;
    }

    let mut weights = init;
    let mut velocity = Velocity::zeros(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut iteration = 0;
    for epoch in 0..cfg.sgd.total_epochs {
        let lr = lr_at(epoch, &cfg.sgd)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.sgd.batch_size) {
            iteration += 1;
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| if cfg.augment { augment(&data[i], rng.gen()) } else { data[i].clone() })
                .collect();
            let images: Vec<Tensor<f32>> = batch.iter().map(|s| s.image.clone()).collect();
            let targets: Vec<&[Target]> = batch.iter().map(|s| s.targets.as_slice()).collect();
            let tape = forward_train(spec, &weights, &images, BnMode::BatchStats)?;
            let (loss, detect_grads) = batch_loss(spec, &tape, &targets, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration, message: format!("loss became {loss} in epoch {epoch} at learning rate {lr}") });
            }
            let grads = backward(spec, &weights, &tape, &detect_grads)?;
            drop(tape);
            sgd_step(&mut weights, &grads, &mut velocity, &cfg.sgd, epoch)?;
            let record = LossRecord { iteration, epoch, lr, loss };
            on_iteration(&record);
            log.push(record);
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let mut snapshot = weights.clone();
            calibrate(spec, &mut snapshot, data, cfg)?;
            on_checkpoint(epoch + 1, &snapshot)?;
        }
    }
    calibrate(spec, &mut weights, data, cfg)?;
    Ok(TrainOutcome { weights, log })
}

fn calibrate(spec: &NetworkSpec, weights: &mut WeightStore<f32>, data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if !cfg.calibrate {
        return Ok(());
    }
    let images: Vec<Tensor<f32>> = data.iter().map(|s| s.image.clone()).collect();
    calibrate_batchnorm(spec, weights, &images, CALIBRATION_CHUNK)
}

/// Images per batch-statistics pass when recomputing running statistics.
pub const CALIBRATION_CHUNK: usize = 32;
