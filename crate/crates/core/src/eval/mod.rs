//! Detection scoring: IoU, greedy matching, 11-point interpolated AP and mAP,
//! with optional KITTI-style difficulty filtering.

mod geometry;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::detect::Detection;
use crate::error::{config_err, Error, Result};

pub use geometry::{iou, Rect};

/// Class names of the KITTI road-object subset, in class-id order.
pub const KITTI_CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

/// A labelled object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: Rect,
    /// Fraction of the object outside the image, 0–1.
    pub truncation: f64,
    /// 0 visible, 1 partly occluded, 2 largely occluded, 3 unknown.
    pub occlusion: u8,
}

impl GtBox {
    pub fn new(class_id: usize, bbox: Rect) -> Self {
        GtBox { class_id, bbox, truncation: 0.0, occlusion: 0 }
    }

    pub fn height_px(&self) -> f64 {
        self.bbox.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    /// No filtering: every ground-truth box counts.
    All,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "moderate" | "mod" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            "all" => Ok(Difficulty::All),
            other => Err(config_err!("unknown difficulty `{other}`")),
        }
    }
}

/// Qualification thresholds of one difficulty level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyRule {
    pub min_height: f64,
    pub max_occlusion: u8,
    pub max_truncation: f64,
}

impl DifficultyRule {
    pub fn admits(&self, gt: &GtBox) -> bool {
        gt.height_px() >= self.min_height && gt.occlusion <= self.max_occlusion && gt.truncation <= self.max_truncation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyTable {
    pub easy: DifficultyRule,
    pub moderate: DifficultyRule,
    pub hard: DifficultyRule,
}

impl Default for DifficultyTable {
    /// The KITTI devkit thresholds.
    fn default() -> Self {
        DifficultyTable {
            easy: DifficultyRule { min_height: 40.0, max_occlusion: 0, max_truncation: 0.15 },
            moderate: DifficultyRule { min_height: 25.0, max_occlusion: 1, max_truncation: 0.30 },
            hard: DifficultyRule { min_height: 25.0, max_occlusion: 2, max_truncation: 0.50 },
        }
    }
}

impl DifficultyTable {
    fn rule(&self, level: Difficulty) -> Option<&DifficultyRule> {
        match level {
            Difficulty::Easy => Some(&self.easy),
            Difficulty::Moderate => Some(&self.moderate),
            Difficulty::Hard => Some(&self.hard),
            Difficulty::All => None,
        }
    }
}

/// Levels a box qualifies for. Empty means the box is ignored at every level.
pub fn difficulty_of(gt: &GtBox, table: &DifficultyTable) -> Vec<Difficulty> {
    [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard]
        .into_iter()
        .filter(|&d| table.rule(d).is_some_and(|r| r.admits(gt)))
        .collect()
}

/// Outcome of greedy matching, flags aligned with the input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub det_is_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Detection indices by descending score; equal scores keep insertion order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Best unmatched same-class ground truth with IoU ≥ `thresh`; first wins on IoU ties.
fn best_match(det: &Detection, gts: &[GtBox], eligible: impl Fn(usize) -> bool, thresh: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        if gt.class_id != det.class_id || !eligible(g) {
            continue;
        }
        let o = iou(&det.bbox, &gt.bbox);
        if o >= thresh && best.is_none_or(|(_, b)| o > b) {
            best = Some((g, o));
        }
    }
    best.map(|(g, _)| g)
}

/// Greedy matching in descending score order; each ground truth is matched at most once.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> MatchResult {
    let mut det_is_tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for d in score_order(dets) {
        if let Some(g) = best_match(&dets[d], gts, |g| !gt_matched[g], iou_thresh) {
            gt_matched[g] = true;
            det_is_tp[d] = true;
        }
    }
    MatchResult { det_is_tp, gt_matched }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub curve: Vec<PrPoint>,
    /// Set when there was no ground truth; `ap` is then 0 by definition.
    pub no_ground_truth: bool,
}

/// 11-point interpolated average precision of `(score, is_tp)` pairs.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> ApResult {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(scored.len());
    for i in order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        curve.push(PrPoint { recall, precision: tp as f64 / (tp + fp) as f64 });
    }
    if num_gt == 0 {
        return ApResult { ap: 0.0, curve, no_ground_truth: true };
    }
    let ap = (0..=10)
        .map(|r| {
            let r = r as f64 / 10.0;
            curve.iter().filter(|p| p.recall >= r - 1e-12).map(|p| p.precision).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0;
    ApResult { ap, curve, no_ground_truth: false }
}

/// Labels of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageLabels {
    pub objects: Vec<GtBox>,
    /// Regions where detections are neither rewarded nor penalised.
    pub dont_care: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub class_names: Vec<String>,
    pub iou_thresholds: Vec<f64>,
    pub difficulty: Difficulty,
    pub table: DifficultyTable,
}

impl EvalConfig {
    /// KITTI protocol: IoU 0.7 for cars, 0.5 for pedestrians and cyclists.
    pub fn kitti(difficulty: Difficulty) -> Self {
        EvalConfig {
            class_names: KITTI_CLASSES.iter().map(|s| s.to_string()).collect(),
            iou_thresholds: vec![0.7, 0.5, 0.5],
            difficulty,
            table: DifficultyTable::default(),
        }
    }

    /// PASCAL protocol: IoU 0.5 for every class, no difficulty filter.
    pub fn voc<S: AsRef<str>>(class_names: &[S]) -> Self {
        EvalConfig {
            class_names: class_names.iter().map(|s| s.as_ref().to_string()).collect(),
            iou_thresholds: vec![0.5; class_names.len()],
            difficulty: Difficulty::All,
            table: DifficultyTable::default(),
        }
    }

    pub fn with_threshold(mut self, class: &str, thresh: f64) -> Result<Self> {
        if !(thresh > 0.0 && thresh <= 1.0) {
            return Err(config_err!("IoU threshold {thresh} outside (0, 1]"));
        }
        let k = self.class_id(class)?;
        self.iou_thresholds[k] = thresh;
        Ok(self)
    }

    pub fn class_id(&self, name: &str) -> Result<usize> {
        self.class_names.iter().position(|n| n == name).ok_or_else(|| config_err!("unknown class `{name}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub name: String,
    pub ap: ApResult,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub difficulty: Difficulty,
    pub classes: Vec<ClassResult>,
    /// Mean AP over classes that have ground truth, as a fraction.
    pub map: f64,
}

impl EvalReport {
    pub fn map_percent(&self) -> f64 {
        100.0 * self.map
    }

    pub fn ap_percent(&self, class: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.name == class).map(|c| 100.0 * c.ap.ap)
    }

    /// Plain-text AP table, percentages with two decimals.
    pub fn table(&self) -> String {
        let mut s = format!("difficulty {:?}\n{:<12} {:>8} {:>6} {:>6}\n", self.difficulty, "class", "AP", "gt", "dets");
        for c in &self.classes {
            let ap = if c.ap.no_ground_truth { "n/a".to_string() } else { format!("{:.2}", 100.0 * c.ap.ap) };
            let _ = writeln!(s, "{:<12} {:>8} {:>6} {:>6}", c.name, ap, c.num_gt, c.num_det);
        }
        let _ = writeln!(s, "{:<12} {:>8.2}", "mAP", self.map_percent());
        s
    }

    /// `recall,precision` rows of one class's curve.
    pub fn pr_csv(&self, class: &str) -> Option<String> {
        let c = self.classes.iter().find(|c| c.name == class)?;
        let mut s = String::from("recall,precision\n");
        for p in &c.ap.curve {
            let _ = writeln!(s, "{:.6},{:.6}", p.recall, p.precision);
        }
        Some(s)
    }
}

/// Score detections against labels for every class under `cfg`.
///
/// Ground truth outside the requested difficulty is ignored: it is not
/// counted, and detections overlapping it (IoU ≥ threshold) are dropped
/// rather than scored as false positives. The same holds for detections
/// whose area lies mostly (by the class threshold) inside a don't-care
/// region, and, under a difficulty filter, for unmatched detections shorter
/// than that level's height floor.
pub fn evaluate(
    dets: &BTreeMap<String, Vec<Detection>>,
    labels: &BTreeMap<String, ImageLabels>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.iou_thresholds.len() != cfg.class_names.len() {
        return Err(config_err!("need one IoU threshold per class"));
    }
    if let Some(key) = dets.keys().find(|k| !labels.contains_key(*k)) {
        return Err(Error::Argument(format!("detections for image `{key}` have no labels")));
    }
    let num_classes = cfg.class_names.len();
    if let Some(bad) = labels.values().flat_map(|l| &l.objects).find(|g| g.class_id >= num_classes) {
        return Err(config_err!("label class id {} outside the {num_classes} configured classes", bad.class_id));
    }
    let rule = cfg.table.rule(cfg.difficulty);
    let empty = Vec::new();
    let mut classes = Vec::with_capacity(num_classes);
    for (k, name) in cfg.class_names.iter().enumerate() {
        let thresh = cfg.iou_thresholds[k];
        let mut scored = Vec::new();
        let mut num_gt = 0;
        let mut num_det = 0;
        for (key, image) in labels {
            let gts: Vec<GtBox> = image.objects.iter().filter(|g| g.class_id == k).copied().collect();
            let care: Vec<bool> = gts.iter().map(|g| rule.is_none_or(|r| r.admits(g))).collect();
            num_gt += care.iter().filter(|&&c| c).count();
            let image_dets: Vec<Detection> = dets.get(key).unwrap_or(&empty).iter().filter(|d| d.class_id == k).copied().collect();
            num_det += image_dets.len();
            let mut matched = vec![false; gts.len()];
            for d in score_order(&image_dets) {
                let det = &image_dets[d];
                if let Some(g) = best_match(det, &gts, |g| care[g] && !matched[g], thresh) {
                    matched[g] = true;
                    scored.push((det.score, true));
                    continue;
                }
                let hits_ignored = gts.iter().zip(&care).any(|(g, &c)| !c && iou(&det.bbox, &g.bbox) >= thresh);
                let in_dont_care = image.dont_care.iter().any(|r| inside_fraction(&det.bbox, r) >= thresh);
                let too_small = rule.is_some_and(|r| det.bbox.height() < r.min_height);
                if !(hits_ignored || in_dont_care || too_small) {
                    scored.push((det.score, false));
                }
            }
        }
        classes.push(ClassResult { name: name.clone(), ap: average_precision(&scored, num_gt), num_gt, num_det });
    }
    let counted: Vec<f64> = classes.iter().filter(|c| !c.ap.no_ground_truth).map(|c| c.ap.ap).collect();
    let map = if counted.is_empty() { 0.0 } else { counted.iter().sum::<f64>() / counted.len() as f64 };
    Ok(EvalReport { difficulty: cfg.difficulty, classes, map })
}

/// Fraction of `a`'s area inside `region`.
fn inside_fraction(a: &Rect, region: &Rect) -> f64 {
    let area = a.area();
    if area == 0.0 {
        return 0.0;
    }
    let iw = (a.x2.min(region.x2) - a.x1.max(region.x1)).max(0.0);
    let ih = (a.y2.min(region.y2) - a.y1.max(region.y1)).max(0.0);
    iw * ih / area
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f64, r: Rect) -> Detection {
        Detection { bbox: r, class_id, score }
    }

    #[test]
    fn single_and_duplicate_matches() {
        let r = Rect::new(0.0, 0.0, 10.0, 10.0);
        let gts = [GtBox::new(0, r)];
        let m = match_detections(&[det(0, 0.9, r)], &gts, 0.5);
        assert_eq!(m.det_is_tp, vec![true]);
        let m = match_detections(&[det(0, 0.6, r), det(0, 0.9, r)], &gts, 0.5);
        assert_eq!(m.det_is_tp, vec![false, true]);
        assert_eq!(m.gt_matched, vec![true]);
        let m = match_detections(&[det(1, 0.9, r)], &gts, 0.5);
        assert_eq!(m.det_is_tp, vec![false]);
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(average_precision(&[(0.9, true), (0.5, true)], 2).ap, 1.0);
        assert_eq!(average_precision(&[(0.9, false), (0.5, false)], 2).ap, 0.0);
        assert_eq!(average_precision(&[], 3).ap, 0.0);
        let none = average_precision(&[(0.9, false)], 0);
        assert!(none.no_ground_truth && none.ap == 0.0);
    }

    #[test]
    fn ap_hand_worked() {
        // Cumulative (recall, precision): (1/3, 1), (1/3, 1/2), (2/3, 2/3), (1, 3/4).
        // Recall levels 0–0.3 interpolate to 1, levels 0.4–1.0 to 3/4.
        let scored = [(0.9, true), (0.8, false), (0.7, true), (0.6, true)];
        let r = average_precision(&scored, 3);
        assert_eq!(r.ap, (4.0 * 1.0 + 7.0 * 0.75) / 11.0);
    }

    #[test]
    fn difficulty_levels() {
        let t = DifficultyTable::default();
        let gt = |h: f64, occ: u8, trunc: f64| GtBox { class_id: 0, bbox: Rect::new(0.0, 0.0, 10.0, h), truncation: trunc, occlusion: occ };
        assert_eq!(difficulty_of(&gt(50.0, 0, 0.0), &t), vec![Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard]);
        assert_eq!(difficulty_of(&gt(30.0, 1, 0.2), &t), vec![Difficulty::Moderate, Difficulty::Hard]);
        assert_eq!(difficulty_of(&gt(30.0, 2, 0.4), &t), vec![Difficulty::Hard]);
        assert!(difficulty_of(&gt(10.0, 0, 0.0), &t).is_empty());
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let mut labels = BTreeMap::new();
        labels.insert("a".to_string(), ImageLabels { objects: vec![GtBox::new(0, Rect::new(0.0, 0.0, 50.0, 50.0)), GtBox::new(2, Rect::new(60.0, 0.0, 90.0, 80.0))], dont_care: vec![] });
        let perfect: BTreeMap<String, Vec<Detection>> = labels
            .iter()
            .map(|(k, l)| (k.clone(), l.objects.iter().map(|g| det(g.class_id, 1.0, g.bbox)).collect()))
            .collect();
        let cfg = EvalConfig::kitti(Difficulty::All);
        assert_eq!(evaluate(&perfect, &labels, &cfg).unwrap().map_percent(), 100.0);
        assert_eq!(evaluate(&BTreeMap::new(), &labels, &cfg).unwrap().map_percent(), 0.0);
    }

    #[test]
    fn ignored_ground_truth_does_not_penalise() {
        let mut labels = BTreeMap::new();
        let tiny = Rect::new(0.0, 0.0, 10.0, 10.0);
        let big = Rect::new(100.0, 100.0, 160.0, 180.0);
        labels.insert("a".to_string(), ImageLabels { objects: vec![GtBox::new(1, tiny), GtBox::new(1, big)], dont_care: vec![Rect::new(300.0, 0.0, 400.0, 100.0)] });
        let mut dets = BTreeMap::new();
        dets.insert("a".to_string(), vec![det(1, 0.9, tiny), det(1, 0.8, big), det(1, 0.7, Rect::new(310.0, 10.0, 340.0, 60.0))]);
        let r = evaluate(&dets, &labels, &EvalConfig::kitti(Difficulty::Moderate)).unwrap();
        assert_eq!(r.classes[1].num_gt, 1);
        assert_eq!(r.ap_percent("Pedestrian"), Some(100.0));
        let r = evaluate(&dets, &labels, &EvalConfig::kitti(Difficulty::All)).unwrap();
        assert_eq!(r.classes[1].num_gt, 2);
        assert_eq!(r.ap_percent("Pedestrian"), Some(100.0));
    }

    #[test]
    fn config_errors() {
        assert!(EvalConfig::kitti(Difficulty::All).with_threshold("Van", 0.5).is_err());
        assert!(EvalConfig::kitti(Difficulty::All).with_threshold("Car", 0.0).is_err());
        let mut dets = BTreeMap::new();
        dets.insert("x".to_string(), vec![]);
        assert!(evaluate(&dets, &BTreeMap::new(), &EvalConfig::kitti(Difficulty::All)).is_err());
    }
}
