//! Dense rank-3 feature maps and the layer kernels the detectors are built from.
//!
//! Every kernel comes in two flavours: the production path exported here, and a
//! direct loop implementation in [`reference`] that serves as its oracle. The
//! kernels are generic over [`Real`] so the same code runs in `f32` for
//! inference and in `f64` for finite-difference gradient checks.

mod conv;
mod ops;
pub mod reference;

use std::cell::RefCell;
use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

pub use conv::{col2im, conv2d, conv2d_fast, im2col, im2col_into, ConvGeometry, Padding};
pub use ops::{batchnorm_infer, concat_channels, maxpool2x2, relu, split_channels, upsample2x_nearest};

/// Floating point element type of a [`Tensor`].
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    /// `c = a · b + beta · c` for row-major `c` (m × n).
    ///
    /// `a` is m × k, stored row-major, or k × m when `trans_a` is set; the same
    /// convention applies to `b` (k × n, or n × k when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn matmul(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    /// Run `f` on a reusable per-thread buffer of `len` elements with unspecified contents.
    fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the element type")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $pool:ident) => {
        impl Real for $t {
            fn matmul(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the slices are long enough for the strided access pattern,
                // checked by the assertion above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R {
                let mut buf = $pool.with(|p| p.borrow_mut().pop()).unwrap_or_default();
                if buf.len() < len {
                    buf.resize(len, 0.0);
                }
                let out = f(&mut buf[..len]);
                $pool.with(|p| p.borrow_mut().push(buf));
                out
            }
        }
    };
}

thread_local! {
    static SCRATCH_F32: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
    static SCRATCH_F64: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

impl_real!(f32, matrixmultiply::sgemm, SCRATCH_F32);
impl_real!(f64, matrixmultiply::dgemm, SCRATCH_F64);

/// Channels × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Height × width × channels, the order feature map sizes are usually quoted in.
    pub fn hwc(&self) -> String {
        format!("{} × {} × {}", self.height, self.width, self.channels)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.channels, self.height, self.width)
    }
}

/// A feature map stored channel-major, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(shape_err!("tensor {shape} needs {} values, got {}", shape.len(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for i in 0..shape.height {
                for j in 0..shape.width {
                    data.push(f(c, i, j));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.shape.height + i) * self.shape.width + j
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        self.data[self.index(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, value: T) {
        let idx = self.index(c, i, j);
        self.data[idx] = value;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane = self.shape.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap()).collect(),
        }
    }

    /// Largest elementwise absolute difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        if self.shape != other.shape {
            return T::infinity();
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution filters laid out `[out][in][ky][kx]`, plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvWeights<T> {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(shape_err!("kernel size must be 1 or 3, got {kernel}"));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(shape_err!("convolution with {in_channels} inputs and {out_channels} outputs"));
        }
        let expected = out_channels * in_channels * kernel * kernel;
        if weights.len() != expected {
            return Err(shape_err!("conv {in_channels}->{out_channels} k{kernel} needs {expected} weights, got {}", weights.len()));
        }
        if bias.len() != out_channels {
            return Err(shape_err!("conv with {out_channels} outputs needs as many biases, got {}", bias.len()));
        }
        Ok(ConvWeights { out_channels, in_channels, kernel, weights, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        ConvWeights {
            out_channels,
            in_channels,
            kernel,
            weights: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Weight count `M · N · k²`, bias excluded.
    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }
}

/// Per-channel batch normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
}

impl<T: Real> BnParams<T> {
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    /// Identity-initialised parameters: gamma 1, beta 0, mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::lit(Self::DEFAULT_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(shape_err!("batch norm parameter arrays disagree in length"));
        }
        if !(self.epsilon > T::zero()) {
            return Err(shape_err!("batch norm epsilon must be positive"));
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(shape_err!("batch norm running variance must be non-negative"));
        }
        Ok(())
    }
}
