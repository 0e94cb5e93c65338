//! Production kernels against the element-at-a-time reference kernels.

use mffd::tensor::{self, reference, BnParams, ConvWeights, Padding, Shape, Tensor};
use rand::Rng;

use super::{random_tensor, rng, OracleCheck};

fn diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b) as f64
}

fn check(name: &'static str, cases: usize, seed: u64, mut case: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> f64) -> OracleCheck {
    let mut r = rng(seed);
    let worst = (0..cases).map(|_| case(&mut r)).fold(0.0, f64::max);
    OracleCheck { name, cases, worst }
}

fn random_shape(r: &mut impl Rng, even: bool) -> Shape {
    let c = r.gen_range(1..=6);
    if even {
        Shape::new(c, 2 * r.gen_range(1..=7), 2 * r.gen_range(1..=7))
    } else {
        Shape::new(c, r.gen_range(1..=13), r.gen_range(1..=13))
    }
}

pub fn conv_case(r: &mut impl Rng) -> f64 {
    let kernel = if r.gen_bool(0.5) { 1 } else { 3 };
    let stride = r.gen_range(1..=2);
    let mut s = random_shape(r, false);
    let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    if padding == Padding::Valid {
        s.height = s.height.max(kernel);
        s.width = s.width.max(kernel);
    }
    let out = r.gen_range(1..=9);
    let x: Tensor<f32> = random_tensor(r, s);
    let n = out * s.channels * kernel * kernel;
    let w = ConvWeights::new(out, s.channels, kernel, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(), (0..out).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    diff(&tensor::conv2d_fast(&x, &w, stride, padding).unwrap(), &reference::conv2d(&x, &w, stride, padding).unwrap())
}

pub fn run(cases: usize, seed: u64) -> Vec<OracleCheck> {
    vec![
        check("conv2d", cases, seed, conv_case),
        check("batchnorm", cases, seed + 1, |r| {
            let x: Tensor<f32> = { let s = random_shape(r, false); random_tensor(r, s) };
            let c = x.channels();
            let p = BnParams {
                gamma: (0..c).map(|_| r.gen_range(-2.0..2.0)).collect(),
                beta: (0..c).map(|_| r.gen_range(-1.0..1.0)).collect(),
                running_mean: (0..c).map(|_| r.gen_range(-1.0..1.0)).collect(),
                running_var: (0..c).map(|_| r.gen_range(0.1..3.0)).collect(),
                epsilon: 1e-5,
            };
            diff(&tensor::batchnorm_infer(&x, &p).unwrap(), &reference::batchnorm_infer(&x, &p).unwrap())
        }),
        check("relu", cases, seed + 2, |r| {
            let x: Tensor<f32> = { let s = random_shape(r, false); random_tensor(r, s) };
            diff(&tensor::relu(&x), &reference::relu(&x))
        }),
        check("maxpool2x2", cases, seed + 3, |r| {
            let x: Tensor<f32> = { let s = random_shape(r, true); random_tensor(r, s) };
            diff(&tensor::maxpool2x2(&x).unwrap(), &reference::maxpool2x2(&x).unwrap())
        }),
        check("upsample2x", cases, seed + 4, |r| {
            let x: Tensor<f32> = { let s = random_shape(r, false); random_tensor(r, s) };
            diff(&tensor::upsample2x_nearest(&x), &reference::upsample2x_nearest(&x))
        }),
        check("concat", cases, seed + 5, |r| {
            let a: Tensor<f32> = { let s = random_shape(r, false); random_tensor(r, s) };
            let b: Tensor<f32> = { let s = Shape::new(r.gen_range(1..=6), a.height(), a.width()); random_tensor(r, s) };
            diff(&tensor::concat_channels(&a, &b).unwrap(), &reference::concat_channels(&a, &b).unwrap())
        }),
    ]
}
