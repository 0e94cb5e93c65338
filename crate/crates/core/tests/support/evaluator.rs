//! Evaluator oracles: exhaustive NMS, brute-force matching, hand-worked AP, difficulty nesting.

use std::collections::BTreeMap;

use mffd::detect::{nms, Detection};
use mffd::eval::{self, average_precision, difficulty_of, evaluate, match_detections, Difficulty, DifficultyTable, EvalConfig, GtBox, ImageLabels, Rect};
use rand::Rng;

use super::rng;

fn oracle_iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn random_rect(r: &mut impl Rng) -> Rect {
    let (x, y) = (r.gen_range(0.0..40.0), r.gen_range(0.0..40.0));
    Rect::new(x, y, x + r.gen_range(2.0..25.0), y + r.gen_range(2.0..25.0))
}

fn random_dets(r: &mut impl Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n).map(|_| Detection { bbox: random_rect(r), class_id: r.gen_range(0..classes), score: r.gen_range(0.0..1.0) }).collect()
}

/// The kept set is the unique subset in which no two same-class members overlap
/// above the threshold and every excluded box overlaps a higher-scored member.
/// Found by trying every subset.
pub fn nms_oracle(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let n = dets.len();
    let conflict = |i: usize, j: usize| dets[i].class_id == dets[j].class_id && oracle_iou(&dets[i].bbox, &dets[j].bbox) > thresh;
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask >> i & 1 == 1;
        let independent = (0..n).all(|i| !kept(i) || (0..n).all(|j| j == i || !kept(j) || !conflict(i, j)));
        let covered = (0..n).all(|i| kept(i) || (0..n).any(|j| kept(j) && dets[j].score > dets[i].score && conflict(i, j)));
        if independent && covered {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "the greedy fixed point is unique");
    let mut out: Vec<Detection> = (0..n).filter(|&i| found[0] >> i & 1 == 1).map(|i| dets[i]).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Trials where the library disagrees with the exhaustive oracle.
pub fn nms_mismatches(trials: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..trials)
        .filter(|_| {
            let n = r.gen_range(0..=10);
            let dets = random_dets(&mut r, n, 2);
            let thresh = r.gen_range(0.1..0.8);
            nms(&dets, thresh) != nms_oracle(&dets, thresh)
        })
        .count()
}

/// Score-ordered greedy matching restated directly.
pub fn match_oracle(dets: &[Detection], gts: &[GtBox], thresh: f64) -> (Vec<bool>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut tp = vec![false; dets.len()];
    let mut used = vec![false; gts.len()];
    for d in order {
        let candidates = (0..gts.len()).filter(|&g| !used[g] && gts[g].class_id == dets[d].class_id);
        let best = candidates.map(|g| (g, oracle_iou(&dets[d].bbox, &gts[g].bbox))).filter(|&(_, o)| o >= thresh).fold(None, |acc: Option<(usize, f64)>, (g, o)| match acc {
            Some((_, b)) if b >= o => acc,
            _ => Some((g, o)),
        });
        if let Some((g, _)) = best {
            used[g] = true;
            tp[d] = true;
        }
    }
    (tp, used)
}

pub fn match_mismatches(trials: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..trials)
        .filter(|_| {
            let n = r.gen_range(0..=10);
            let dets = random_dets(&mut r, n, 2);
            let gts: Vec<GtBox> = (0..r.gen_range(0..=6)).map(|_| GtBox::new(r.gen_range(0..2), random_rect(&mut r))).collect();
            let m = match_detections(&dets, &gts, 0.5);
            (m.det_is_tp, m.gt_matched) != match_oracle(&dets, &gts, 0.5)
        })
        .count()
}

/// Worked by hand: cumulative (recall, precision) after each detection is
/// (1/4, 1), (1/4, 1/2), (2/4, 2/3), (2/4, 1/2), (3/4, 3/5), (3/4, 1/2).
/// Interpolated precision is 1 at recall 0–0.2, 2/3 at 0.3–0.5, 3/5 at 0.6–0.7
/// and 0 at 0.8–1.0, so AP = (3·1 + 3·2/3 + 2·3/5) / 11 = 6.2 / 11.
pub const AP_FIXTURE: [(f64, bool); 6] = [(0.95, true), (0.9, false), (0.8, true), (0.7, false), (0.6, true), (0.5, false)];
pub const AP_FIXTURE_GT: usize = 4;
pub const AP_FIXTURE_EXPECTED: f64 = 6.2 / 11.0;

pub fn ap_fixture() -> f64 {
    average_precision(&AP_FIXTURE, AP_FIXTURE_GT).ap
}

fn det(class_id: usize, score: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
    Detection { bbox: Rect::new(x1, y1, x2, y2), class_id, score }
}

/// Three images, two classes, IoU 0.5.
///
/// Class `a`: hits at 0.9, 0.7 (IoU 0.6) and 0.6, a duplicate at 0.8; three
/// ground truths. AP = (4·1 + 7·3/4) / 11.
/// Class `b`: misses at 0.95 (IoU 1/3) and 0.5 (no overlap), a hit at 0.4; one
/// ground truth. AP = 1/3.
pub fn three_image_fixture() -> (BTreeMap<String, Vec<Detection>>, BTreeMap<String, ImageLabels>, [f64; 2]) {
    let gt = |c, x1, y1, x2, y2| GtBox::new(c, Rect::new(x1, y1, x2, y2));
    let mut labels = BTreeMap::new();
    labels.insert("img1".to_string(), ImageLabels { objects: vec![gt(0, 0.0, 0.0, 10.0, 10.0), gt(0, 20.0, 20.0, 30.0, 30.0)], dont_care: vec![] });
    labels.insert("img2".to_string(), ImageLabels { objects: vec![gt(0, 0.0, 0.0, 20.0, 20.0)], dont_care: vec![] });
    labels.insert("img3".to_string(), ImageLabels { objects: vec![gt(1, 0.0, 0.0, 10.0, 10.0)], dont_care: vec![] });
    let mut dets = BTreeMap::new();
    dets.insert("img1".to_string(), vec![det(0, 0.9, 0.0, 0.0, 10.0, 10.0), det(0, 0.8, 0.0, 0.0, 10.0, 10.0), det(0, 0.6, 20.0, 20.0, 30.0, 30.0)]);
    dets.insert("img2".to_string(), vec![det(0, 0.7, 0.0, 0.0, 20.0, 12.0), det(1, 0.5, 50.0, 50.0, 60.0, 60.0)]);
    dets.insert("img3".to_string(), vec![det(1, 0.95, 5.0, 0.0, 15.0, 10.0), det(1, 0.4, 0.0, 0.0, 10.0, 10.0)]);
    (dets, labels, [(4.0 + 7.0 * 0.75) / 11.0, 1.0 / 3.0])
}

pub fn three_image_result() -> (eval::EvalReport, [f64; 2]) {
    let (dets, labels, expected) = three_image_fixture();
    (evaluate(&dets, &labels, &EvalConfig::voc(&["a", "b"])).unwrap(), expected)
}

fn random_gt(r: &mut impl Rng) -> GtBox {
    let (x, y) = (r.gen_range(0.0..1000.0), r.gen_range(0.0..300.0));
    GtBox {
        class_id: r.gen_range(0..3),
        bbox: Rect::new(x, y, x + r.gen_range(5.0..200.0), y + r.gen_range(5.0..100.0)),
        truncation: r.gen_range(0.0..1.0),
        occlusion: r.gen_range(0..=3),
    }
}

/// Randomised boxes that break Easy ⊆ Moderate ⊆ Hard, either per box or in
/// the ground-truth counts of a full evaluation.
pub fn nesting_violations(trials: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let table = DifficultyTable::default();
    let mut bad = 0;
    for _ in 0..trials {
        let g = random_gt(&mut r);
        let levels = difficulty_of(&g, &table);
        let has = |d| levels.contains(&d);
        if (has(Difficulty::Easy) && !has(Difficulty::Moderate)) || (has(Difficulty::Moderate) && !has(Difficulty::Hard)) {
            bad += 1;
        }
    }
    let mut labels = BTreeMap::new();
    for i in 0..20 {
        labels.insert(format!("{i}"), ImageLabels { objects: (0..10).map(|_| random_gt(&mut r)).collect(), dont_care: vec![] });
    }
    let dets = BTreeMap::new();
    let counts: Vec<Vec<usize>> = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard]
        .into_iter()
        .map(|d| evaluate(&dets, &labels, &EvalConfig::kitti(d)).unwrap().classes.iter().map(|c| c.num_gt).collect())
        .collect();
    for k in 0..3 {
        if counts[0][k] > counts[1][k] || counts[1][k] > counts[2][k] {
            bad += 1;
        }
    }
    bad
}
