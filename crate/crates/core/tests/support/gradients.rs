//! Central finite differences against the analytic backward passes, in f64.

use std::collections::HashMap;

use mffd::detect::AnchorSet;
use mffd::io::parse_config;
use mffd::netgraph::{LayerParams, WeightStore};
use mffd::tensor::{self, BnParams, ConvWeights, Padding, Shape, Tensor};
use mffd::train::{self, assign_targets, backward, flatten_trainables, forward_train, loss_for_assignments, unflatten_trainables, BnMode, LossWeights, Target};
use rand::Rng;

use super::{random_tensor, rng};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
pub const WORST_TOL: f64 = 1e-4;
pub const MIN_PASS_FRACTION: f64 = 0.99;
/// Gradients smaller than this are compared absolutely: both sides are pure rounding noise there.
/// Central differences cannot resolve gradient differences below their own round-off.
pub const FD_NOISE: f64 = 1e-10;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d <= FD_NOISE {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs())
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub within: usize,
    pub worst: f64,
    /// Largest analytic gradient among biases cancelled by a following batch norm.
    pub cancelled_bias_worst: f64,
}

impl GradCheck {
    fn new(name: impl Into<String>) -> Self {
        GradCheck { name: name.into(), checked: 0, within: 0, worst: 0.0, cancelled_bias_worst: 0.0 }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if e <= REL_TOL {
            self.within += 1;
        }
        self.worst = self.worst.max(e);
    }

    pub fn pass_fraction(&self) -> f64 {
        self.within as f64 / self.checked.max(1) as f64
    }
}

pub fn summarize(checks: &[GradCheck]) -> (usize, usize, f64) {
    let checked = checks.iter().map(|c| c.checked).sum();
    let within = checks.iter().map(|c| c.within).sum();
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    (checked, within, worst)
}

/// Central difference of `f` along every entry of `values`.
fn numeric(values: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            values[i] = orig + STEP;
            let up = f(values);
            values[i] = orig - STEP;
            let down = f(values);
            values[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(shape: Shape, data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn compare(check: &mut GradCheck, analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (&a, &n) in analytic.iter().zip(numeric) {
        check.record(a, n);
    }
}

fn random_vec(r: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn conv(r: &mut impl Rng, kernel: usize, stride: usize, padding: Padding) -> GradCheck {
    let mut check = GradCheck::new(format!("conv k{kernel} s{stride} {padding:?}"));
    let s = Shape::new(r.gen_range(1..=3), r.gen_range(3..=7), r.gen_range(3..=7));
    let out = r.gen_range(1..=4);
    let x: Tensor<f64> = random_tensor(r, s);
    let n = out * s.channels * kernel * kernel;
    let w = ConvWeights::new(out, s.channels, kernel, random_vec(r, n, -1.0, 1.0), random_vec(r, out, -1.0, 1.0)).unwrap();
    let y_shape = tensor::conv2d(&x, &w, stride, padding).unwrap().shape();
    let probe: Tensor<f64> = random_tensor(r, y_shape);
    let g = train::conv2d_backward(&x, &w, stride, padding, &probe, true).unwrap();

    let mut xs = x.data().to_vec();
    compare(&mut check, g.dx.as_ref().unwrap().data(), &numeric(&mut xs, &mut |v| dot(&tensor::conv2d(&with_data(s, v), &w, stride, padding).unwrap(), &probe)));
    let mut ws = w.weights.clone();
    let wn = numeric(&mut ws, &mut |v| {
        let w2 = ConvWeights { weights: v.to_vec(), ..w.clone() };
        dot(&tensor::conv2d(&x, &w2, stride, padding).unwrap(), &probe)
    });
    compare(&mut check, &g.dweights, &wn);
    let mut bs = w.bias.clone();
    let bn = numeric(&mut bs, &mut |v| {
        let w2 = ConvWeights { bias: v.to_vec(), ..w.clone() };
        dot(&tensor::conv2d(&x, &w2, stride, padding).unwrap(), &probe)
    });
    compare(&mut check, &g.dbias, &bn);
    check
}

/// Keeps inputs away from the relu kink and from max-pool ties.
fn spread_tensor(r: &mut impl Rng, s: Shape) -> Tensor<f64> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, r.gen_range(0..=i));
    }
    let data = order.iter().map(|&k| (k as f64 + 0.5) / s.len() as f64 * 2.0 - 1.0 + 0.01).collect();
    Tensor::new(s, data).unwrap()
}

fn elementwise(r: &mut impl Rng) -> Vec<GradCheck> {
    let mut out = Vec::new();
    let s = Shape::new(2, 4, 6);
    let x = spread_tensor(r, s);

    let mut c = GradCheck::new("relu");
    let probe: Tensor<f64> = random_tensor(r, s);
    let a = train::relu_backward(&tensor::relu(&x), &probe);
    compare(&mut c, a.data(), &numeric(&mut x.data().to_vec(), &mut |v| dot(&tensor::relu(&with_data(s, v)), &probe)));
    out.push(c);

    let mut c = GradCheck::new("maxpool2x2");
    let probe: Tensor<f64> = random_tensor(r, Shape::new(2, 2, 3));
    let a = train::maxpool2x2_backward(&x, &probe);
    compare(&mut c, a.data(), &numeric(&mut x.data().to_vec(), &mut |v| dot(&tensor::maxpool2x2(&with_data(s, v)).unwrap(), &probe)));
    out.push(c);

    let mut c = GradCheck::new("upsample2x");
    let probe: Tensor<f64> = random_tensor(r, Shape::new(2, 8, 12));
    let a = train::upsample2x_backward(&probe);
    compare(&mut c, a.data(), &numeric(&mut x.data().to_vec(), &mut |v| dot(&tensor::upsample2x_nearest(&with_data(s, v)), &probe)));
    out.push(c);

    let mut c = GradCheck::new("concat");
    let b: Tensor<f64> = random_tensor(r, Shape::new(3, 4, 6));
    let probe: Tensor<f64> = random_tensor(r, Shape::new(5, 4, 6));
    let (da, db) = tensor::split_channels(&probe, 2).unwrap();
    compare(&mut c, da.data(), &numeric(&mut x.data().to_vec(), &mut |v| dot(&tensor::concat_channels(&with_data(s, v), &b).unwrap(), &probe)));
    compare(&mut c, db.data(), &numeric(&mut b.data().to_vec(), &mut |v| dot(&tensor::concat_channels(&x, &with_data(b.shape(), v)).unwrap(), &probe)));
    out.push(c);
    out
}

fn random_bn(r: &mut impl Rng, c: usize) -> BnParams<f64> {
    BnParams {
        gamma: random_vec(r, c, 0.5, 1.5),
        beta: random_vec(r, c, -0.5, 0.5),
        running_mean: random_vec(r, c, -0.5, 0.5),
        running_var: random_vec(r, c, 0.5, 2.0),
        epsilon: 1e-5,
    }
}

fn batchnorm(r: &mut impl Rng) -> Vec<GradCheck> {
    let s = Shape::new(3, 3, 4);
    let p = random_bn(r, 3);

    let mut inf = GradCheck::new("batchnorm inference");
    let x: Tensor<f64> = random_tensor(r, s);
    let probe: Tensor<f64> = random_tensor(r, s);
    let (dx, dg, db) = train::batchnorm_infer_backward(&x, &p, &probe);
    compare(&mut inf, dx.data(), &numeric(&mut x.data().to_vec(), &mut |v| dot(&tensor::batchnorm_infer(&with_data(s, v), &p).unwrap(), &probe)));
    let gn = numeric(&mut p.gamma.clone(), &mut |v| dot(&tensor::batchnorm_infer(&x, &BnParams { gamma: v.to_vec(), ..p.clone() }).unwrap(), &probe));
    compare(&mut inf, &dg, &gn);
    let bn = numeric(&mut p.beta.clone(), &mut |v| dot(&tensor::batchnorm_infer(&x, &BnParams { beta: v.to_vec(), ..p.clone() }).unwrap(), &probe));
    compare(&mut inf, &db, &bn);

    let mut tr = GradCheck::new("batchnorm batch statistics");
    let batch: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(r, s)).collect();
    let probes: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(r, s)).collect();
    let objective = |b: &[Tensor<f64>], p: &BnParams<f64>| {
        let (y, _) = train::batchnorm_train(b, p).unwrap();
        y.iter().zip(&probes).map(|(y, g)| dot(y, g)).sum::<f64>()
    };
    let (_, cache) = train::batchnorm_train(&batch, &p).unwrap();
    let (dx, dg, db) = train::batchnorm_train_backward(&probes, &cache, &p.gamma);
    let mut flat: Vec<f64> = batch.iter().flat_map(|t| t.data().to_vec()).collect();
    let xn = numeric(&mut flat, &mut |v| {
        let b: Vec<Tensor<f64>> = v.chunks(s.len()).map(|c| with_data(s, c)).collect();
        objective(&b, &p)
    });
    let dx_flat: Vec<f64> = dx.iter().flat_map(|t| t.data().to_vec()).collect();
    compare(&mut tr, &dx_flat, &xn);
    compare(&mut tr, &dg, &numeric(&mut p.gamma.clone(), &mut |v| objective(&batch, &BnParams { gamma: v.to_vec(), ..p.clone() })));
    compare(&mut tr, &db, &numeric(&mut p.beta.clone(), &mut |v| objective(&batch, &BnParams { beta: v.to_vec(), ..p.clone() })));
    vec![inf, tr]
}

fn detection_loss(r: &mut impl Rng) -> GradCheck {
    let mut check = GradCheck::new("detection loss");
    let anchors = AnchorSet::new(vec![(1.0, 1.5), (2.5, 1.0)]).unwrap();
    let s = Shape::new(2 * (5 + 3), 4, 5);
    let raw: Tensor<f64> = random_tensor(r, s);
    let targets = [Target::new(0, 0.3, 0.4, 0.2, 0.3), Target::new(2, 0.75, 0.6, 0.4, 0.25), Target::new(1, 0.1, 0.85, 0.1, 0.2)];
    let lw = LossWeights::default();
    let asg = assign_targets(&raw, &targets, &anchors).unwrap();
    let (_, grad) = loss_for_assignments(&raw, &asg, anchors.len(), &lw).unwrap();
    let n = numeric(&mut raw.data().to_vec(), &mut |v| loss_for_assignments(&with_data(s, v), &asg, anchors.len(), &lw).unwrap().0);
    compare(&mut check, grad.data(), &n);
    check
}

/// A front block and one tinier block feeding a detect layer, 8×8 input.
pub const TWO_MODULE_NET: &str = "\
input 3 8 8
anchors 0.8,1.2 1.5,0.7
front 4 4 6
tinier T 3 6
detect det 2 2
";

fn network(r: &mut impl Rng) -> GradCheck {
    let mut check = GradCheck::new("two-module network");
    let spec = parse_config(TWO_MODULE_NET).unwrap().build().unwrap();
    let mut weights: WeightStore<f64> = WeightStore::<f32>::init(&spec, 7).cast();
    // Spread gamma and beta so the batch-norm paths are not at their identity initialisation.
    let mut flat = flatten_trainables(&weights);
    for v in flat.iter_mut() {
        *v += r.gen_range(-0.05..0.05);
    }
    unflatten_trainables(&mut weights, &flat).unwrap();
    let batch: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(r, spec.input_shape())).collect();
    let targets = [vec![Target::new(1, 0.4, 0.6, 0.5, 0.4)], vec![Target::new(0, 0.7, 0.3, 0.3, 0.6)]];
    let lw = LossWeights::default();
    let taps = spec.detect_taps();

    let tape = forward_train(&spec, &weights, &batch, BnMode::BatchStats).unwrap();
    let mut frozen = HashMap::new();
    let mut detect_grads = HashMap::new();
    for tap in &taps {
        let anchors = spec.anchors_for(tap);
        let outs = tape.output(&spec, &tap.id).unwrap();
        let asg: Vec<_> = outs.iter().zip(&targets).map(|(o, t)| assign_targets(o, t, &anchors).unwrap()).collect();
        let grads: Vec<Tensor<f64>> = outs
            .iter()
            .zip(&asg)
            .map(|(o, a)| loss_for_assignments(o, a, anchors.len(), &lw).unwrap().1.map(|g| g / batch.len() as f64))
            .collect();
        detect_grads.insert(tap.id.clone(), grads);
        frozen.insert(tap.id.clone(), (anchors.len(), asg));
    }
    let analytic = flatten_trainables(&backward(&spec, &weights, &tape, &detect_grads).unwrap());

    let mut params = flatten_trainables(&weights);
    let mut probe = weights.clone();
    let n = numeric(&mut params, &mut |v| {
        unflatten_trainables(&mut probe, v).unwrap();
        let tape = forward_train(&spec, &probe, &batch, BnMode::BatchStats).unwrap();
        frozen
            .iter()
            .map(|(id, (boxes, asg))| {
                let outs = tape.output(&spec, id).unwrap();
                outs.iter().zip(asg).map(|(o, a)| loss_for_assignments(o, a, *boxes, &lw).unwrap().0).sum::<f64>() / batch.len() as f64
            })
            .sum()
    });
    // A bias feeding batch norm is cancelled by the mean; its exact gradient is zero and FD
    // only sees round-off, so those entries are checked for zero instead of compared.
    let mut keep = Vec::with_capacity(analytic.len());
    for (id, p) in weights.layers() {
        match p {
            LayerParams::Conv(c) => {
                keep.extend(std::iter::repeat(true).take(c.weights.len()));
                let cancelled = id.rsplit_once(".conv").is_some_and(|(m, k)| weights.get(&format!("{m}.bn{k}")).is_some());
                keep.extend(std::iter::repeat(!cancelled).take(c.bias.len()));
            }
            LayerParams::Norm(b) => keep.extend(std::iter::repeat(true).take(b.gamma.len() + b.beta.len())),
        }
    }
    assert_eq!(keep.len(), analytic.len());
    let mut a = Vec::new();
    let mut nu = Vec::new();
    for ((&k, &x), &y) in keep.iter().zip(&analytic).zip(&n) {
        if k {
            a.push(x);
            nu.push(y);
        } else {
            check.cancelled_bias_worst = check.cancelled_bias_worst.max(x.abs());
        }
    }
    let (analytic, n) = (a, nu);
    compare(&mut check, &analytic, &n);
    check
}

pub fn run(seed: u64) -> Vec<GradCheck> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (kernel, stride, padding) in [(1, 1, Padding::Same), (3, 1, Padding::Same), (3, 2, Padding::Same), (3, 1, Padding::Valid), (1, 2, Padding::Valid)] {
        out.push(conv(&mut r, kernel, stride, padding));
    }
    out.extend(elementwise(&mut r));
    out.extend(batchnorm(&mut r));
    out.push(detection_loss(&mut r));
    out.push(network(&mut r));
    out
}
