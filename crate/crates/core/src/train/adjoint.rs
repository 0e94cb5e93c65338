//! Vector–Jacobian products of the layer kernels, plus batch-statistics batch norm.

use crate::error::{shape_err, Result};
use crate::tensor::{col2im, im2col_into, BnParams, ConvGeometry, ConvWeights, Padding, Real, Shape, Tensor};

/// Gradients of one convolution for one sample.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweights: Vec<T>,
    pub dbias: Vec<T>,
}

/// Backward pass of a same- or valid-padded convolution.
///
/// `dx` is only computed when `need_dx` is set; the first layer of a network
/// does not need it.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &ConvWeights<T>,
    stride: usize,
    padding: Padding,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), w.kernel, stride, padding)?;
    let plane = g.out_plane();
    if dy.shape() != Shape::new(w.out_channels, g.out_height, g.out_width) || x.channels() != w.in_channels {
        return Err(shape_err!("conv backward: upstream gradient {} does not match the layer", dy.shape()));
    }
    let k_dim = w.in_channels * w.kernel * w.kernel;
    let mut dweights = vec![T::zero(); w.weights.len()];
    let dbias = dy.data().chunks_exact(plane).map(|c| c.iter().copied().sum()).collect();
    if g.is_pointwise() {
        T::matmul(false, true, w.out_channels, plane, k_dim, dy.data(), x.data(), T::zero(), &mut dweights);
    } else {
        T::with_scratch(k_dim * plane, |cols| {
            im2col_into(x, &g, cols);
            T::matmul(false, true, w.out_channels, plane, k_dim, dy.data(), cols, T::zero(), &mut dweights);
        });
    }

    let dx = if !need_dx {
        None
    } else if g.is_pointwise() {
        let mut dx = vec![T::zero(); k_dim * plane];
        T::matmul(true, false, k_dim, w.out_channels, plane, &w.weights, dy.data(), T::zero(), &mut dx);
        Some(Tensor::new(x.shape(), dx)?)
    } else {
        Some(T::with_scratch(k_dim * plane, |dcols| {
            T::matmul(true, false, k_dim, w.out_channels, plane, &w.weights, dy.data(), T::zero(), dcols);
            col2im(dcols, x.channels(), &g)
        }))
    };
    Ok(ConvGrads { dx, dweights, dbias })
}

/// `dx` for `y = relu(x)`, given the forward output `y`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y.data().iter().zip(dy.data()).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect();
    Tensor::new(y.shape(), data).expect("same shape")
}

/// Routes each window's gradient to its first maximal element.
pub fn maxpool2x2_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut dx = Tensor::zeros(s);
    for c in 0..s.channels {
        for i in 0..dy.height() {
            for j in 0..dy.width() {
                let (mut bi, mut bj) = (2 * i, 2 * j);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    if x.at(c, 2 * i + di, 2 * j + dj) > x.at(c, bi, bj) {
                        (bi, bj) = (2 * i + di, 2 * j + dj);
                    }
                }
                dx.set(c, bi, bj, dy.at(c, i, j));
            }
        }
    }
    dx
}

/// Sums each 2×2 block of the upstream gradient.
pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    Tensor::from_fn(Shape::new(s.channels, s.height / 2, s.width / 2), |c, i, j| {
        dy.at(c, 2 * i, 2 * j) + dy.at(c, 2 * i, 2 * j + 1) + dy.at(c, 2 * i + 1, 2 * j) + dy.at(c, 2 * i + 1, 2 * j + 1)
    })
}

/// Backward of inference-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batchnorm_infer_backward<T: Real>(x: &Tensor<T>, p: &BnParams<T>, dy: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = x.channels();
    let mut dx = dy.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let inv_std = T::one() / (p.running_var[ch] + p.epsilon).sqrt();
        for ((d, &xv), &g) in dx.channel_mut(ch).iter_mut().zip(x.channel(ch)).zip(dy.channel(ch)) {
            dgamma[ch] = dgamma[ch] + g * (xv - p.running_mean[ch]) * inv_std;
            dbeta[ch] = dbeta[ch] + g;
            *d = g * p.gamma[ch] * inv_std;
        }
    }
    (dx, dgamma, dbeta)
}

/// Saved state of a batch-statistics normalisation.
#[derive(Debug, Clone)]
pub struct BnBatchCache<T> {
    pub x_hat: Vec<Tensor<T>>,
    pub mean: Vec<T>,
    /// Biased variance over batch, rows and columns.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

const LANES: usize = 8;

// Eight independent accumulators so the reduction vectorizes.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for k in 0..LANES {
            acc[k] = acc[k] + f(ch[k]);
        }
    }
    tail.iter().fold(acc.iter().fold(T::zero(), |a, &b| a + b), |a, &v| a + f(v))
}

fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for k in 0..LANES {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Batch norm using the statistics of `batch` itself (training mode).
pub fn batchnorm_train<T: Real>(batch: &[Tensor<T>], p: &BnParams<T>) -> Result<(Vec<Tensor<T>>, BnBatchCache<T>)> {
    let Some(first) = batch.first() else {
        return Err(shape_err!("batch norm over an empty batch"));
    };
    let s = first.shape();
    if batch.iter().any(|t| t.shape() != s) || p.gamma.len() != s.channels {
        return Err(shape_err!("batch norm: inconsistent batch or parameter shapes"));
    }
    let count = T::from_usize(batch.len() * s.plane()).unwrap();
    let mut mean = vec![T::zero(); s.channels];
    let mut var = vec![T::zero(); s.channels];
    for c in 0..s.channels {
        let sum = batch.iter().fold(T::zero(), |acc, t| acc + lane_sum(t.channel(c), |v| v));
        mean[c] = sum / count;
        let mu = mean[c];
        let sq = batch.iter().fold(T::zero(), |acc, t| acc + lane_sum(t.channel(c), |v| (v - mu) * (v - mu)));
        var[c] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.epsilon).sqrt()).collect();
    let mut x_hat = Vec::with_capacity(batch.len());
    let mut out = Vec::with_capacity(batch.len());
    for t in batch {
        let mut xh = t.clone();
        let mut y = Tensor::zeros(s);
        for c in 0..s.channels {
            let (mu, is, g, b) = (mean[c], inv_std[c], p.gamma[c], p.beta[c]);
            for (h, v) in xh.channel_mut(c).iter_mut().zip(y.channel_mut(c)) {
                *h = (*h - mu) * is;
                *v = g * *h + b;
            }
        }
        x_hat.push(xh);
        out.push(y);
    }
    Ok((out, BnBatchCache { x_hat, mean, var, inv_std }))
}

/// Backward of [`batchnorm_train`]: `(dx per sample, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Real>(
    dy: &[Tensor<T>],
    cache: &BnBatchCache<T>,
    gamma: &[T],
) -> (Vec<Tensor<T>>, Vec<T>, Vec<T>) {
    let channels = gamma.len();
    let m = T::from_usize(dy.len() * dy[0].shape().plane()).unwrap();
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for (g, xh) in dy.iter().zip(&cache.x_hat) {
        for c in 0..channels {
            dgamma[c] = dgamma[c] + lane_dot(g.channel(c), xh.channel(c));
            dbeta[c] = dbeta[c] + lane_sum(g.channel(c), |v| v);
        }
    }
    // dx = gamma·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
    let dx = dy
        .iter()
        .zip(&cache.x_hat)
        .map(|(g, xh)| {
            let mut dx = g.clone();
            for c in 0..channels {
                let scale = gamma[c] * cache.inv_std[c] / m;
                let (db, dg) = (dbeta[c], dgamma[c]);
                for (d, &h) in dx.channel_mut(c).iter_mut().zip(xh.channel(c)) {
                    *d = scale * (m * *d - db - h * dg);
                }
            }
            dx
        })
        .collect();
    (dx, dgamma, dbeta)
}
