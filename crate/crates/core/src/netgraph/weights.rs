use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BnParams, ConvWeights, Real};

use super::{LayerKind, NetworkSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T = f32> {
    Conv(ConvWeights<T>),
    Norm(BnParams<T>),
}

/// Parameters of every conv, detect and batch-norm node, keyed by node id in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore<T = f32> {
    layers: IndexMap<String, LayerParams<T>>,
}

impl<T: Real> WeightStore<T> {
    /// Seeded initialisation: conv weights uniform in `±sqrt(1 / (M·k²))`, zero bias,
    /// batch norm at identity.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, |m, n, k| {
            let bound = (1.0 / (m * k * k) as f64).sqrt();
            (0..n * m * k * k).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
        })
    }

    /// All conv weights zero, batch norm at identity.
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self::build(spec, |m, n, k| vec![T::zero(); n * m * k * k])
    }

    fn build(spec: &NetworkSpec, mut weights: impl FnMut(usize, usize, usize) -> Vec<T>) -> Self {
        let mut layers = IndexMap::new();
        for node in spec.nodes() {
            if let Some((filters, kernel, _)) = node.kind.conv_params() {
                let m = spec.in_channels(node);
                let conv = ConvWeights { out_channels: filters, in_channels: m, kernel, weights: weights(m, filters, kernel), bias: vec![T::zero(); filters] };
                layers.insert(node.id.clone(), LayerParams::Conv(conv));
            } else if node.kind == LayerKind::BatchNorm {
                let c = spec.shape_of(&node.id).unwrap().channels;
                layers.insert(node.id.clone(), LayerParams::Norm(BnParams::identity(c)));
            }
        }
        WeightStore { layers }
    }

    /// Same structure with every value (running statistics and epsilon included) set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for slice in out.all_slices_mut() {
            slice.fill(T::zero());
        }
        for p in out.layers.values_mut() {
            if let LayerParams::Norm(bn) = p {
                bn.epsilon = T::zero();
            }
        }
        out
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &LayerParams<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, id: &str) -> Option<&LayerParams<T>> {
        self.layers.get(id)
    }

    pub fn conv(&self, id: &str) -> Result<&ConvWeights<T>> {
        match self.layers.get(id) {
            Some(LayerParams::Conv(c)) => Ok(c),
            _ => Err(Error::Load(format!("no convolution weights for layer `{id}`"))),
        }
    }

    pub fn conv_mut(&mut self, id: &str) -> Result<&mut ConvWeights<T>> {
        match self.layers.get_mut(id) {
            Some(LayerParams::Conv(c)) => Ok(c),
            _ => Err(Error::Load(format!("no convolution weights for layer `{id}`"))),
        }
    }

    pub fn bn(&self, id: &str) -> Result<&BnParams<T>> {
        match self.layers.get(id) {
            Some(LayerParams::Norm(b)) => Ok(b),
            _ => Err(Error::Load(format!("no batch norm parameters for layer `{id}`"))),
        }
    }

    pub fn bn_mut(&mut self, id: &str) -> Result<&mut BnParams<T>> {
        match self.layers.get_mut(id) {
            Some(LayerParams::Norm(b)) => Ok(b),
            _ => Err(Error::Load(format!("no batch norm parameters for layer `{id}`"))),
        }
    }

    /// Check that every parameterised node of `spec` has correctly sized parameters.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = Self::zeros(spec);
        if expected.layers.len() != self.layers.len() {
            return Err(Error::Load(format!("weights cover {} layers, network has {}", self.layers.len(), expected.layers.len())));
        }
        for (id, want) in &expected.layers {
            let ok = match (want, self.layers.get(id)) {
                (LayerParams::Conv(a), Some(LayerParams::Conv(b))) => {
                    (a.out_channels, a.in_channels, a.kernel, a.weights.len(), a.bias.len())
                        == (b.out_channels, b.in_channels, b.kernel, b.weights.len(), b.bias.len())
                }
                (LayerParams::Norm(a), Some(LayerParams::Norm(b))) => a.channels() == b.channels() && b.validate().is_ok(),
                _ => false,
            };
            if !ok {
                return Err(Error::Load(format!("weights for layer `{id}` are missing or mis-shaped")));
            }
        }
        Ok(())
    }

    /// Optimised values in canonical order: conv weights, bias; BN gamma, beta.
    pub fn trainable_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for p in self.layers.values() {
            match p {
                LayerParams::Conv(c) => out.extend([c.weights.as_slice(), c.bias.as_slice()]),
                LayerParams::Norm(b) => out.extend([b.gamma.as_slice(), b.beta.as_slice()]),
            }
        }
        out
    }

    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for p in self.layers.values_mut() {
            match p {
                LayerParams::Conv(c) => {
                    out.push(c.weights.as_mut_slice());
                    out.push(c.bias.as_mut_slice());
                }
                LayerParams::Norm(b) => {
                    out.push(b.gamma.as_mut_slice());
                    out.push(b.beta.as_mut_slice());
                }
            }
        }
        out
    }

    /// Stored values in file order: conv weights, bias; BN gamma, beta, mean, variance.
    pub fn all_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for p in self.layers.values() {
            match p {
                LayerParams::Conv(c) => out.extend([c.weights.as_slice(), c.bias.as_slice()]),
                LayerParams::Norm(b) => out.extend([
                    b.gamma.as_slice(),
                    b.beta.as_slice(),
                    b.running_mean.as_slice(),
                    b.running_var.as_slice(),
                ]),
            }
        }
        out
    }

    pub fn all_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for p in self.layers.values_mut() {
            match p {
                LayerParams::Conv(c) => {
                    out.push(c.weights.as_mut_slice());
                    out.push(c.bias.as_mut_slice());
                }
                LayerParams::Norm(b) => {
                    out.push(b.gamma.as_mut_slice());
                    out.push(b.beta.as_mut_slice());
                    out.push(b.running_mean.as_mut_slice());
                    out.push(b.running_var.as_mut_slice());
                }
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_slices().iter().map(|s| s.len()).sum()
    }

    pub fn stored_count(&self) -> usize {
        self.all_slices().iter().map(|s| s.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|(id, p)| {
                let p = match p {
                    LayerParams::Conv(w) => LayerParams::Conv(ConvWeights {
                        out_channels: w.out_channels,
                        in_channels: w.in_channels,
                        kernel: w.kernel,
                        weights: c(&w.weights),
                        bias: c(&w.bias),
                    }),
                    LayerParams::Norm(b) => LayerParams::Norm(BnParams {
                        gamma: c(&b.gamma),
                        beta: c(&b.beta),
                        running_mean: c(&b.running_mean),
                        running_var: c(&b.running_var),
                        epsilon: U::from_f64(b.epsilon.to_f64().unwrap()).unwrap(),
                    }),
                };
                (id.clone(), p)
            })
            .collect();
        WeightStore { layers }
    }
}
