//! Photometric jitter in HSV space and horizontal flips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::{Sample, Target};

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Hue shift as a fraction of the hue circle.
    pub hue: f32,
    pub saturation: f32,
    pub exposure: f32,
    pub flip: bool,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter { hue: 0.0, saturation: 1.0, exposure: 1.0, flip: false };
    pub const MAX_HUE: f32 = 0.1;
    pub const MAX_SCALE: f32 = 1.5;

    /// Hue uniform in `±MAX_HUE`; saturation and exposure uniform in
    /// `[1, MAX_SCALE]` and inverted half the time; flip with probability 1/2.
    pub fn draw(rng: &mut impl Rng) -> Jitter {
        let scale = |rng: &mut dyn rand::RngCore| {
            let s: f32 = rng.gen_range(1.0..=Self::MAX_SCALE);
            if rng.gen_bool(0.5) {
                s
            } else {
                1.0 / s
            }
        };
        let hue = rng.gen_range(-Self::MAX_HUE..=Self::MAX_HUE);
        let saturation = scale(rng);
        let exposure = scale(rng);
        Jitter { hue, saturation, exposure, flip: rng.gen_bool(0.5) }
    }
}

/// `(h, s, v)` with hue in `[0, 1)`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if max == 0.0 || delta == 0.0 {
        return (0.0, 0.0, max);
    }
    let s = delta / max;
    let h = if r == max {
        (g - b) / delta
    } else if g == max {
        2.0 + (b - r) / delta
    } else {
        4.0 + (r - g) / delta
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    if s == 0.0 {
        return (v, v, v);
    }
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Apply one jitter draw to an RGB sample. Boxes follow the flip.
pub fn apply_jitter(sample: &Sample, j: &Jitter) -> Sample {
    let img = &sample.image;
    let (h, w) = (img.height(), img.width());
    let mut out = Tensor::zeros(img.shape());
    for y in 0..h {
        for x in 0..w {
            let sx = if j.flip { w - 1 - x } else { x };
            let (hh, ss, vv) = rgb_to_hsv(img.at(0, y, sx), img.at(1, y, sx), img.at(2, y, sx));
            let (r, g, b) = hsv_to_rgb(hh + j.hue, (ss * j.saturation).clamp(0.0, 1.0), (vv * j.exposure).clamp(0.0, 1.0));
            out.set(0, y, x, r.clamp(0.0, 1.0));
            out.set(1, y, x, g.clamp(0.0, 1.0));
            out.set(2, y, x, b.clamp(0.0, 1.0));
        }
    }
    let targets = sample
        .targets
        .iter()
        .map(|t| if j.flip { Target { cx: 1.0 - t.cx, ..*t } } else { *t })
        .collect();
    Sample { image: out, targets }
}

/// Seeded random augmentation.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_jitter(sample, &Jitter::draw(&mut rng))
}
