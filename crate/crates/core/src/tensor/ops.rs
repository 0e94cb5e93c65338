use crate::error::{shape_err, Result};

use super::{BnParams, Real, Shape, Tensor};

/// Inference-mode batch normalization with stored statistics.
pub fn batchnorm_infer<T: Real>(x: &Tensor<T>, p: &BnParams<T>) -> Result<Tensor<T>> {
    let c = x.channels();
    if p.gamma.len() != c || p.beta.len() != c || p.running_mean.len() != c || p.running_var.len() != c {
        return Err(shape_err!("batch norm has {} channels, tensor has {c}", p.gamma.len()));
    }
    let mut out = x.clone();
    for ch in 0..c {
        let scale = p.gamma[ch] / (p.running_var[ch] + p.epsilon).sqrt();
        let shift = p.beta[ch] - scale * p.running_mean[ch];
        for v in out.channel_mut(ch) {
            *v = scale * *v + shift;
        }
    }
    Ok(out)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// 2×2 max pooling with stride 2. Odd spatial sizes are rejected.
pub fn maxpool2x2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.height % 2 != 0 || s.width % 2 != 0 {
        return Err(shape_err!("max pooling needs even spatial dims, got {s}"));
    }
    let (oh, ow) = (s.height / 2, s.width / 2);
    let mut out = Vec::with_capacity(s.channels * oh * ow);
    for c in 0..s.channels {
        let src = x.channel(c);
        for rows in src.chunks_exact(2 * s.width) {
            let (top, bottom) = rows.split_at(s.width);
            for (t, b) in top.chunks_exact(2).zip(bottom.chunks_exact(2)) {
                out.push(t[0].max(t[1]).max(b[0].max(b[1])));
            }
        }
    }
    Tensor::new(Shape::new(s.channels, oh, ow), out)
}

/// Nearest-neighbour ×2 upsampling: `out[c, i, j] = x[c, i / 2, j / 2]`.
pub fn upsample2x_nearest<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let ow = s.width * 2;
    let mut out = Vec::with_capacity(s.len() * 4);
    for c in 0..s.channels {
        for row in x.channel(c).chunks_exact(s.width.max(1)).take(s.height) {
            let start = out.len();
            out.extend(row.iter().flat_map(|&v| [v, v]));
            out.extend_from_within(start..start + ow);
        }
    }
    Tensor::new(Shape::new(s.channels, s.height * 2, ow), out).expect("upsampled length")
}

/// Channel concatenation, `a`'s channels first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.height != sb.height || sa.width != sb.width {
        return Err(shape_err!("cannot concatenate {sa} with {sb}: spatial sizes differ"));
    }
    let mut data = Vec::with_capacity(sa.len() + sb.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(Shape::new(sa.channels + sb.channels, sa.height, sa.width), data)
}

/// Inverse of [`concat_channels`]: the first `channels` channels, then the rest.
pub fn split_channels<T: Real>(x: &Tensor<T>, channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if channels > s.channels {
        return Err(shape_err!("cannot split {channels} channels off {s}"));
    }
    let (head, tail) = x.data().split_at(channels * s.plane());
    Ok((
        Tensor::new(Shape::new(channels, s.height, s.width), head.to_vec())?,
        Tensor::new(Shape::new(s.channels - channels, s.height, s.width), tail.to_vec())?,
    ))
}
