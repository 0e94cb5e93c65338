use indexmap::IndexMap;

use crate::error::{shape_err, Result};
use crate::tensor::{batchnorm_infer, concat_channels, conv2d_fast, maxpool2x2, relu, upsample2x_nearest, Padding, Real, Tensor};

use super::{LayerKind, NetworkSpec, WeightStore, INPUT};

/// Node outputs of one forward pass, keyed by node id.
#[derive(Debug, Clone)]
pub struct Activations<T = f32> {
    outputs: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Activations<T> {
    pub fn get(&self, id: &str) -> Option<&Tensor<T>> {
        self.outputs.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.outputs.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Inference forward pass keeping every intermediate output.
pub fn forward<T: Real>(spec: &NetworkSpec, weights: &WeightStore<T>, x: &Tensor<T>) -> Result<Activations<T>> {
    run(spec, weights, x, true)
}

/// Inference forward pass keeping only detect outputs; intermediates are freed as soon as possible.
pub fn forward_outputs<T: Real>(spec: &NetworkSpec, weights: &WeightStore<T>, x: &Tensor<T>) -> Result<Activations<T>> {
    run(spec, weights, x, false)
}

fn run<T: Real>(spec: &NetworkSpec, weights: &WeightStore<T>, x: &Tensor<T>, keep_all: bool) -> Result<Activations<T>> {
    if x.shape() != spec.input_shape() {
        return Err(shape_err!("network expects input {}, got {}", spec.input_shape(), x.shape()));
    }
    let nodes = spec.nodes();
    let mut last_use = vec![0usize; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        for input in &node.inputs {
            if let Some(p) = spec.position(input) {
                last_use[p] = i;
            }
        }
    }

    let mut live: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        let input = fetch(spec, &live, x, &node.inputs[0])?;
        let out = match &node.kind {
            LayerKind::Conv { stride, .. } => conv2d_fast(input, weights.conv(&node.id)?, *stride, Padding::Same)?,
            LayerKind::Detect { .. } => conv2d_fast(input, weights.conv(&node.id)?, 1, Padding::Same)?,
            LayerKind::BatchNorm => batchnorm_infer(input, weights.bn(&node.id)?)?,
            LayerKind::Relu => relu(input),
            LayerKind::MaxPool2x2 => maxpool2x2(input)?,
            LayerKind::Upsample2x => upsample2x_nearest(input),
            LayerKind::Concat => {
                let mut acc = input.clone();
                for other in &node.inputs[1..] {
                    acc = concat_channels(&acc, fetch(spec, &live, x, other)?)?;
                }
                acc
            }
        };
        live[i] = Some(out);
        if !keep_all {
            for input in &node.inputs {
                if let Some(p) = spec.position(input) {
                    if last_use[p] == i && !matches!(nodes[p].kind, LayerKind::Detect { .. }) {
                        live[p] = None;
                    }
                }
            }
        }
    }

    let outputs = nodes
        .iter()
        .zip(live)
        .filter_map(|(n, t)| {
            let keep = keep_all || matches!(n.kind, LayerKind::Detect { .. });
            t.filter(|_| keep).map(|t| (n.id.clone(), t))
        })
        .collect();
    Ok(Activations { outputs })
}

fn fetch<'a, T: Real>(spec: &NetworkSpec, live: &'a [Option<Tensor<T>>], x: &'a Tensor<T>, id: &str) -> Result<&'a Tensor<T>> {
    if id == INPUT {
        return Ok(x);
    }
    let p = spec.position(id).ok_or_else(|| shape_err!("unknown layer `{id}`"))?;
    live[p].as_ref().ok_or_else(|| crate::Error::Internal(format!("activation of `{id}` already released")))
}
