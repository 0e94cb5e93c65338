//! Straight-from-the-definition kernels, one element at a time.
//!
//! These exist to be compared against the production kernels; nothing in the
//! inference or training paths calls them.

use crate::error::{shape_err, Result};

use super::{BnParams, Real, Shape, Tensor};

pub use super::conv::conv2d;

pub fn batchnorm_infer<T: Real>(x: &Tensor<T>, p: &BnParams<T>) -> Result<Tensor<T>> {
    if p.gamma.len() != x.channels() || p.running_var.len() != x.channels() {
        return Err(shape_err!("batch norm channel mismatch"));
    }
    Ok(Tensor::from_fn(x.shape(), |c, i, j| {
        p.gamma[c] * (x.at(c, i, j) - p.running_mean[c]) / (p.running_var[c] + p.epsilon).sqrt() + p.beta[c]
    }))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |c, i, j| x.at(c, i, j).max(T::zero()))
}

pub fn maxpool2x2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.height % 2 == 1 || s.width % 2 == 1 {
        return Err(shape_err!("odd spatial dims {s}"));
    }
    Ok(Tensor::from_fn(Shape::new(s.channels, s.height / 2, s.width / 2), |c, i, j| {
        let mut m = T::neg_infinity();
        for di in 0..2 {
            for dj in 0..2 {
                m = m.max(x.at(c, 2 * i + di, 2 * j + dj));
            }
        }
        m
    }))
}

pub fn upsample2x_nearest<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.channels, 2 * s.height, 2 * s.width), |c, i, j| x.at(c, i / 2, j / 2))
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(shape_err!("spatial mismatch"));
    }
    let ca = a.channels();
    Ok(Tensor::from_fn(Shape::new(ca + b.channels(), a.height(), a.width()), |c, i, j| {
        if c < ca {
            a.at(c, i, j)
        } else {
            b.at(c - ca, i, j)
        }
    }))
}
