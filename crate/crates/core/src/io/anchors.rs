//! Anchor priors from k-means over box sizes with `1 − IoU` distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::AnchorSet;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;

/// IoU of two boxes sharing a centre.
fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    1.0 - shape_iou(a, b)
}

/// Cluster `(w, h)` sizes into `k` priors, sorted by area.
///
/// Seeding is k-means++ under the same distance; iteration stops when no
/// assignment changes or after [`MAX_ITERATIONS`] rounds.
pub fn fit_anchors(sizes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    if k == 0 || sizes.len() < k {
        return Err(Error::Argument(format!("need at least {k} boxes to fit {k} anchors, have {}", sizes.len())));
    }
    if let Some(bad) = sizes.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0 && w.is_finite() && h.is_finite())) {
        return Err(Error::Argument(format!("box size {bad:?} is not positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![sizes[rng.gen_range(0..sizes.len())]];
    while centroids.len() < k {
        let d: Vec<f64> = sizes.iter().map(|&s| centroids.iter().map(|&c| distance(s, c)).fold(f64::INFINITY, f64::min).powi(2)).collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            d.iter().position(|&v| {
                r -= v;
                r < 0.0
            })
            .unwrap_or(sizes.len() - 1)
        } else {
            rng.gen_range(0..sizes.len())
        };
        centroids.push(sizes[next]);
    }

    let mut assign = vec![usize::MAX; sizes.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (a, &s) in assign.iter_mut().zip(sizes) {
            let best = (0..k).min_by(|&i, &j| distance(s, centroids[i]).total_cmp(&distance(s, centroids[j]))).unwrap();
            changed |= *a != best;
            *a = best;
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> = sizes.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(s, _)| *s).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *centroid = (members.iter().map(|m| m.0).sum::<f64>() / n, members.iter().map(|m| m.1).sum::<f64>() / n);
            }
        }
    }
    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    AnchorSet::new(centroids)
}

/// Mean over boxes of the best IoU with any prior.
pub fn mean_best_iou(sizes: &[(f64, f64)], anchors: &AnchorSet) -> f64 {
    let total: f64 = sizes.iter().map(|&s| anchors.priors().iter().map(|&p| shape_iou(s, p)).fold(0.0, f64::max)).sum();
    total / sizes.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes() {
        let sizes = vec![(2.0, 3.0); 5];
        let a = fit_anchors(&sizes, 5, 1).unwrap();
        assert!(a.priors().iter().all(|&p| p == (2.0, 3.0)));
    }

    #[test]
    fn two_clusters() {
        let mut sizes = Vec::new();
        for i in 0..20 {
            let d = i as f64 * 0.01;
            sizes.push((1.0 + d, 1.0 - d));
            sizes.push((8.0 - d, 5.0 + d));
        }
        let a = fit_anchors(&sizes, 2, 3).unwrap();
        let p = a.priors();
        assert!((p[0].0 - 1.095).abs() < 1e-9 && (p[0].1 - 0.905).abs() < 1e-9, "{p:?}");
        assert!((p[1].0 - 7.905).abs() < 1e-9 && (p[1].1 - 5.095).abs() < 1e-9, "{p:?}");
        assert_eq!(fit_anchors(&sizes, 2, 3).unwrap(), a);
    }

    #[test]
    fn too_few_boxes() {
        assert!(matches!(fit_anchors(&[(1.0, 1.0)], 2, 0), Err(Error::Argument(_))));
    }
}
