//! Batched forward pass that records what reverse-mode differentiation needs,
//! and the backward pass over the layer graph.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::netgraph::{LayerKind, NetworkSpec, WeightStore, INPUT};
use crate::tensor::{
    batchnorm_infer, concat_channels, conv2d_fast, maxpool2x2, relu, split_channels, upsample2x_nearest, Padding, Real, Tensor,
};

use super::adjoint::{
    batchnorm_infer_backward, batchnorm_train, batchnorm_train_backward, conv2d_backward, maxpool2x2_backward, relu_backward,
    upsample2x_backward, BnBatchCache,
};

/// How batch-norm layers normalise during a recorded forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch (training).
    BatchStats,
    /// Stored running statistics (inference).
    Running,
}

/// Activations of a batched forward pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Vec<Tensor<T>>>,
    bn_cache: HashMap<usize, BnBatchCache<T>>,
    mode: BnMode,
}

impl<T: Real> Tape<T> {
    pub fn batch_len(&self) -> usize {
        self.inputs.len()
    }

    /// Per-sample outputs of node `id`.
    pub fn output(&self, spec: &NetworkSpec, id: &str) -> Option<&[Tensor<T>]> {
        if id == INPUT {
            return Some(&self.inputs);
        }
        spec.position(id).map(|p| self.outputs[p].as_slice())
    }

    /// Batch mean and variance seen by a batch-norm node in [`BnMode::BatchStats`].
    pub fn batch_stats(&self, spec: &NetworkSpec, id: &str) -> Option<(&[T], &[T])> {
        let c = self.bn_cache.get(&spec.position(id)?)?;
        Some((&c.mean, &c.var))
    }
}

fn input_of<'a, T>(spec: &NetworkSpec, inputs: &'a [Tensor<T>], outputs: &'a [Vec<Tensor<T>>], id: &str) -> &'a [Tensor<T>] {
    if id == INPUT {
        inputs
    } else {
        &outputs[spec.position(id).expect("validated graph")]
    }
}

/// Run the network over a batch, recording every node output.
pub fn forward_train<T: Real>(spec: &NetworkSpec, weights: &WeightStore<T>, batch: &[Tensor<T>], mode: BnMode) -> Result<Tape<T>> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if let Some(bad) = batch.iter().find(|t| t.shape() != spec.input_shape()) {
        return Err(shape_err!("network expects input {}, got {}", spec.input_shape(), bad.shape()));
    }
    let inputs = batch.to_vec();
    let mut outputs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(spec.nodes().len());
    let mut bn_cache = HashMap::new();
    for (idx, node) in spec.nodes().iter().enumerate() {
        let xs = input_of(spec, &inputs, &outputs, &node.inputs[0]);
        let out: Vec<Tensor<T>> = match &node.kind {
            LayerKind::Conv { stride, .. } => {
                let w = weights.conv(&node.id)?;
                xs.par_iter().map(|x| conv2d_fast(x, w, *stride, Padding::Same)).collect::<Result<_>>()?
            }
            LayerKind::Detect { .. } => {
                let w = weights.conv(&node.id)?;
                xs.par_iter().map(|x| conv2d_fast(x, w, 1, Padding::Same)).collect::<Result<_>>()?
            }
            LayerKind::BatchNorm => {
                let p = weights.bn(&node.id)?;
                match mode {
                    BnMode::BatchStats => {
                        let (y, cache) = batchnorm_train(xs, p)?;
                        bn_cache.insert(idx, cache);
                        y
                    }
                    BnMode::Running => xs.iter().map(|x| batchnorm_infer(x, p)).collect::<Result<_>>()?,
                }
            }
            LayerKind::Relu => xs.iter().map(relu).collect(),
            LayerKind::MaxPool2x2 => xs.iter().map(maxpool2x2).collect::<Result<_>>()?,
            LayerKind::Upsample2x => xs.iter().map(upsample2x_nearest).collect(),
            LayerKind::Concat => {
                let mut acc = xs.to_vec();
                for other in &node.inputs[1..] {
                    let ys = input_of(spec, &inputs, &outputs, other);
                    acc = acc.iter().zip(ys).map(|(a, b)| concat_channels(a, b)).collect::<Result<_>>()?;
                }
                acc
            }
        };
        outputs.push(out);
    }
    Ok(Tape { inputs, outputs, bn_cache, mode })
}

fn accumulate<T: Real>(slot: &mut Option<Vec<Tensor<T>>>, grads: Vec<Tensor<T>>) {
    match slot {
        None => *slot = Some(grads),
        Some(existing) => {
            for (e, g) in existing.iter_mut().zip(grads) {
                for (a, b) in e.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a = *a + *b;
    }
}

/// Reverse pass. `detect_grads` maps detect node ids to per-sample gradients of
/// the loss with respect to their outputs; missing taps contribute nothing.
///
/// Returns a store shaped like `weights` whose conv weights, biases and
/// batch-norm gamma/beta hold gradients (running statistics are zero).
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    weights: &WeightStore<T>,
    tape: &Tape<T>,
    detect_grads: &HashMap<String, Vec<Tensor<T>>>,
) -> Result<WeightStore<T>> {
    let nodes = spec.nodes();
    let n = tape.batch_len();
    let mut grads = weights.zeros_like();
    let mut upstream: Vec<Option<Vec<Tensor<T>>>> = vec![None; nodes.len()];
    for (id, g) in detect_grads {
        let p = spec.position(id).ok_or_else(|| shape_err!("no detect layer `{id}`"))?;
        if g.len() != n || g.iter().zip(&tape.outputs[p]).any(|(a, b)| a.shape() != b.shape()) {
            return Err(shape_err!("gradient for `{id}` does not match its output"));
        }
        accumulate(&mut upstream[p], g.clone());
    }

    for (idx, node) in nodes.iter().enumerate().rev() {
        let Some(dy) = upstream[idx].take() else { continue };
        let first = &node.inputs[0];
        let xs = input_of(spec, &tape.inputs, &tape.outputs, first);
        let send = |target: &str, g: Vec<Tensor<T>>, up: &mut Vec<Option<Vec<Tensor<T>>>>| {
            if let Some(p) = spec.position(target) {
                accumulate(&mut up[p], g);
            }
        };
        match &node.kind {
            LayerKind::Conv { .. } | LayerKind::Detect { .. } => {
                let stride = node.kind.conv_params().map(|(_, _, s)| s).unwrap_or(1);
                let w = weights.conv(&node.id)?;
                let need_dx = first != INPUT;
                let per_sample: Vec<_> = xs
                    .par_iter()
                    .zip(dy.par_iter())
                    .map(|(x, g)| conv2d_backward(x, w, stride, Padding::Same, g, need_dx))
                    .collect::<Result<_>>()?;
                let gw = grads.conv_mut(&node.id)?;
                let mut dxs = Vec::with_capacity(n);
                for s in per_sample {
                    add_into(&mut gw.weights, &s.dweights);
                    add_into(&mut gw.bias, &s.dbias);
                    dxs.extend(s.dx);
                }
                if need_dx {
                    send(first, dxs, &mut upstream);
                }
            }
            LayerKind::BatchNorm => {
                let p = weights.bn(&node.id)?;
                let (dx, dgamma, dbeta) = match tape.mode {
                    BnMode::BatchStats => {
                        let cache = tape.bn_cache.get(&idx).ok_or_else(|| Error::Internal(format!("no batch statistics for `{}`", node.id)))?;
                        batchnorm_train_backward(&dy, cache, &p.gamma)
                    }
                    BnMode::Running => {
                        let mut dg = vec![T::zero(); p.channels()];
                        let mut db = vec![T::zero(); p.channels()];
                        let mut dx = Vec::with_capacity(n);
                        for (x, g) in xs.iter().zip(&dy) {
                            let (d, a, b) = batchnorm_infer_backward(x, p, g);
                            add_into(&mut dg, &a);
                            add_into(&mut db, &b);
                            dx.push(d);
                        }
                        (dx, dg, db)
                    }
                };
                let gb = grads.bn_mut(&node.id)?;
                add_into(&mut gb.gamma, &dgamma);
                add_into(&mut gb.beta, &dbeta);
                send(first, dx, &mut upstream);
            }
            LayerKind::Relu => {
                let dx = tape.outputs[idx].iter().zip(&dy).map(|(y, g)| relu_backward(y, g)).collect();
                send(first, dx, &mut upstream);
            }
            LayerKind::MaxPool2x2 => {
                let dx = xs.iter().zip(&dy).map(|(x, g)| maxpool2x2_backward(x, g)).collect();
                send(first, dx, &mut upstream);
            }
            LayerKind::Upsample2x => {
                let dx = dy.iter().map(upsample2x_backward).collect();
                send(first, dx, &mut upstream);
            }
            LayerKind::Concat => {
                let mut rest = dy;
                for (k, input) in node.inputs.iter().enumerate() {
                    let width = input_of(spec, &tape.inputs, &tape.outputs, input)[0].channels();
                    let last = k + 1 == node.inputs.len();
                    let (head, tail): (Vec<_>, Vec<_>) = if last {
                        (std::mem::take(&mut rest), Vec::new())
                    } else {
                        rest.iter().map(|g| split_channels(g, width)).collect::<Result<Vec<_>>>()?.into_iter().unzip()
                    };
                    send(input, head, &mut upstream);
                    rest = tail;
                }
            }
        }
    }
    Ok(grads)
}

/// Replace running statistics with population statistics of `data`.
///
/// The data is processed in chunks of `chunk` samples with batch statistics;
/// the stored mean is the sample-weighted average of chunk means and the stored
/// variance the matching pooled variance. With `chunk >= data.len()` an
/// inference pass over `data` reproduces the training-mode pass exactly.
pub fn calibrate_batchnorm<T: Real>(spec: &NetworkSpec, weights: &mut WeightStore<T>, data: &[Tensor<T>], chunk: usize) -> Result<()> {
    if data.is_empty() || chunk == 0 {
        return Err(Error::Argument("calibration needs data and a positive chunk size".into()));
    }
    let bn_ids: Vec<String> = spec.nodes().iter().filter(|n| n.kind == LayerKind::BatchNorm).map(|n| n.id.clone()).collect();
    let mut sums: HashMap<&str, (Vec<T>, Vec<T>)> = HashMap::new();
    for part in data.chunks(chunk) {
        let tape = forward_train(spec, weights, part, BnMode::BatchStats)?;
        let w = T::from_usize(part.len()).unwrap();
        for id in &bn_ids {
            let (mean, var) = tape.batch_stats(spec, id).expect("batch stats recorded");
            let entry = sums.entry(id).or_insert_with(|| (vec![T::zero(); mean.len()], vec![T::zero(); mean.len()]));
            for c in 0..mean.len() {
                entry.0[c] = entry.0[c] + w * mean[c];
                entry.1[c] = entry.1[c] + w * (var[c] + mean[c] * mean[c]);
            }
        }
    }
    let total = T::from_usize(data.len()).unwrap();
    for id in &bn_ids {
        let (m, sq) = &sums[id.as_str()];
        let bn = weights.bn_mut(id)?;
        for c in 0..m.len() {
            let mean = m[c] / total;
            bn.running_mean[c] = mean;
            bn.running_var[c] = (sq[c] / total - mean * mean).max(T::zero());
        }
    }
    Ok(())
}

/// Trainable values concatenated in [`WeightStore::trainable_slices`] order.
pub fn flatten_trainables<T: Real>(store: &WeightStore<T>) -> Vec<T> {
    store.trainable_slices().concat()
}

/// Inverse of [`flatten_trainables`].
pub fn unflatten_trainables<T: Real>(store: &mut WeightStore<T>, values: &[T]) -> Result<()> {
    let mut offset = 0;
    for s in store.trainable_slices_mut() {
        let end = offset + s.len();
        s.copy_from_slice(values.get(offset..end).ok_or_else(|| Error::Argument("too few values".into()))?);
        offset = end;
    }
    if offset != values.len() {
        return Err(Error::Argument("too many values".into()));
    }
    Ok(())
}
