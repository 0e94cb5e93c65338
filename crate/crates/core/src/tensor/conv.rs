use crate::error::{shape_err, Result};

use super::{ConvWeights, Real, Shape, Tensor};

/// Zero padding policy for a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output is `ceil(in / stride)` along each axis; `(k - 1) / 2` zeros lead each axis.
    Same,
    /// No padding; the window never leaves the input.
    Valid,
}

/// Resolved spatial layout of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(shape_err!("stride must be 1 or 2, got {stride}"));
        }
        if input.is_empty() {
            return Err(shape_err!("convolution input {input} is empty"));
        }
        let (h, w) = (input.height, input.width);
        let (pad, out_height, out_width) = match padding {
            Padding::Same => ((kernel - 1) / 2, h.div_ceil(stride), w.div_ceil(stride)),
            Padding::Valid => {
                if h < kernel || w < kernel {
                    return Err(shape_err!("input {input} smaller than a {kernel}×{kernel} window"));
                }
                (0, (h - kernel) / stride + 1, (w - kernel) / stride + 1)
            }
        };
        Ok(ConvGeometry { kernel, stride, pad, in_height: h, in_width: w, out_height, out_width })
    }

    pub fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Input row/column touched by output position `o` and kernel tap `k`, if inside the map.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    /// Output positions `lo..hi` whose tap `k` lands inside an axis of length `extent`.
    #[inline]
    fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k).div_ceil(stride);
        let hi = if extent + pad > k { ((extent + pad - k - 1) / stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// 1×1, stride 1, unpadded: the patch matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn check_conv<T: Real>(x: &Tensor<T>, w: &ConvWeights<T>) -> Result<()> {
    if x.channels() != w.in_channels {
        return Err(shape_err!(
            "convolution expects {} input channels, tensor has {}",
            w.in_channels,
            x.channels()
        ));
    }
    if w.weights.len() != w.out_channels * w.in_channels * w.kernel * w.kernel || w.bias.len() != w.out_channels {
        return Err(shape_err!("convolution weight arrays do not match the declared shape"));
    }
    Ok(())
}

/// Direct convolution: each output is the bias plus the windowed inner product.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &ConvWeights<T>, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    check_conv(x, w)?;
    let g = ConvGeometry::new(x.shape(), w.kernel, stride, padding)?;
    let mut out = Tensor::zeros(Shape::new(w.out_channels, g.out_height, g.out_width));
    let k = w.kernel;
    for o in 0..w.out_channels {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let mut acc = w.bias[o];
                for i in 0..w.in_channels {
                    for ky in 0..k {
                        let Some(iy) = ConvGeometry::source(oy, ky, stride, g.pad, g.in_height) else {
                            continue;
                        };
                        for kx in 0..k {
                            if let Some(ix) = ConvGeometry::source(ox, kx, stride, g.pad, g.in_width) {
                                acc = acc + w.weight(o, i, ky, kx) * x.at(i, iy, ix);
                            }
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

/// Patch matrix of `x`: `(C·k·k) × (out_h·out_w)`, row `(c·k + ky)·k + kx`.
pub fn im2col<T: Real>(x: &Tensor<T>, g: &ConvGeometry) -> Vec<T> {
    let mut cols = vec![T::zero(); x.channels() * g.kernel * g.kernel * g.out_plane()];
    im2col_into(x, g, &mut cols);
    cols
}

/// [`im2col`] into a caller buffer; every element of `cols` is written.
pub fn im2col_into<T: Real>(x: &Tensor<T>, g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.out_plane();
    for c in 0..x.channels() {
        let src = x.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = ConvGeometry::valid_range(kx, g.stride, g.pad, g.in_width, g.out_width);
                for oy in 0..g.out_height {
                    let dst_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    let Some(iy) = ConvGeometry::source(oy, ky, g.stride, g.pad, g.in_height) else {
                        dst_row.fill(T::zero());
                        continue;
                    };
                    dst_row[..lo].fill(T::zero());
                    dst_row[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let src_row = &src[iy * g.in_width..(iy + 1) * g.in_width];
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (d, &v) in dst_row[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto an input-shaped tensor.
pub fn col2im<T: Real>(cols: &[T], channels: usize, g: &ConvGeometry) -> Tensor<T> {
    let k = g.kernel;
    let plane = g.out_plane();
    let mut x = Tensor::zeros(Shape::new(channels, g.in_height, g.in_width));
    for c in 0..channels {
        let dst = x.channel_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = ConvGeometry::valid_range(kx, g.stride, g.pad, g.in_width, g.out_width);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.out_height {
                    let Some(iy) = ConvGeometry::source(oy, ky, g.stride, g.pad, g.in_height) else {
                        continue;
                    };
                    let src_row = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                    let dst_row = &mut dst[iy * g.in_width + first..(iy + 1) * g.in_width];
                    if g.stride == 1 {
                        for (d, &v) in dst_row[..hi - lo].iter_mut().zip(src_row) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst_row.iter_mut().step_by(g.stride).zip(src_row) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution as a patch-matrix product; same contract as [`conv2d`].
pub fn conv2d_fast<T: Real>(x: &Tensor<T>, w: &ConvWeights<T>, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    check_conv(x, w)?;
    let g = ConvGeometry::new(x.shape(), w.kernel, stride, padding)?;
    let plane = g.out_plane();
    let mut out = Vec::with_capacity(w.out_channels * plane);
    for &b in &w.bias {
        out.extend(std::iter::repeat_n(b, plane));
    }
    let k_dim = w.in_channels * w.kernel * w.kernel;
    if g.is_pointwise() {
        T::matmul(false, false, w.out_channels, k_dim, plane, &w.weights, x.data(), T::one(), &mut out);
    } else {
        T::with_scratch(k_dim * plane, |cols| {
            im2col_into(x, &g, cols);
            T::matmul(false, false, w.out_channels, k_dim, plane, &w.weights, cols, T::one(), &mut out);
        });
    }
    Tensor::new(Shape::new(w.out_channels, g.out_height, g.out_width), out)
}
