//! Synthetic images of flat-coloured rectangles on a noisy background.
//!
//! The class of a rectangle is its shape: wide, tall or square. Colours are
//! random, so hue jitter does not change labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{iou, Rect};
use crate::tensor::{Shape, Tensor};
use crate::train::{Sample, Target};

pub const SHAPE_CLASSES: [&str; 3] = ["wide", "tall", "square"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub max_objects: usize,
    /// The last `small_images` images hold only rectangles no longer than `small_side` pixels.
    pub small_images: usize,
    pub small_side: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { images: 8, width: 576, height: 320, max_objects: 3, small_images: 2, small_side: 24.0, seed: 0 }
    }
}

fn shape_for(class_id: usize, long: f64) -> (f64, f64) {
    match class_id {
        0 => (long, (long / 2.0).round()),
        1 => ((long / 2.0).round(), long),
        _ => (long, long),
    }
}

/// Build the dataset. Rectangles of one image never touch each other.
pub fn synth_dataset(cfg: &SynthConfig) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    (0..cfg.images)
        .map(|index| {
            let small = index + cfg.small_images >= cfg.images;
            let count = rng.gen_range(1..=cfg.max_objects.max(1));
            let mut rects: Vec<(usize, Rect)> = Vec::new();
            let mut attempts = 0;
            while rects.len() < count && attempts < 1000 {
                attempts += 1;
                let class_id = rng.gen_range(0..SHAPE_CLASSES.len());
                let long = if small { rng.gen_range(16.0..=cfg.small_side).round() } else { rng.gen_range(48.0..=150.0f64).round() };
                let (bw, bh) = shape_for(class_id, long);
                let x1 = rng.gen_range(0.0..=w - bw).floor();
                let y1 = rng.gen_range(0.0..=h - bh).floor();
                let r = Rect::new(x1, y1, x1 + bw, y1 + bh);
                let padded = Rect::new(r.x1 - 8.0, r.y1 - 8.0, r.x2 + 8.0, r.y2 + 8.0);
                if rects.iter().all(|(_, o)| iou(o, &padded) == 0.0) {
                    rects.push((class_id, r));
                }
            }
            let base: [f32; 3] = [rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6), rng.gen_range(0.3..0.6)];
            let mut image = Tensor::from_fn(Shape::new(3, cfg.height, cfg.width), |c, _, _| base[c] + rng.gen_range(-0.05..0.05f32));
            for (_, r) in &rects {
                let colour: [f32; 3] = loop {
                    let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
                    if c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f32>() > 0.6 {
                        break c;
                    }
                };
                for y in r.y1 as usize..r.y2 as usize {
                    for x in r.x1 as usize..r.x2 as usize {
                        for (c, v) in colour.iter().enumerate() {
                            image.set(c, y, x, *v);
                        }
                    }
                }
            }
            let targets = rects.iter().map(|(c, r)| Target::from_rect(*c, r, w, h)).collect();
            Sample { image, targets }
        })
        .collect()
}
