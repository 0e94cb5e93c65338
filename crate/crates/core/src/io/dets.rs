//! Detection text: one `class score x1 y1 x2 y2` line per box, six decimals.

use std::fmt::Write as _;
use std::path::Path;

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::eval::Rect;

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = d.bbox;
        writeln!(out, "{} {:.6} {:.6} {:.6} {:.6} {:.6}", d.class_id, d.score, b.x1, b.y1, b.x2, b.y2).unwrap();
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line, message };
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let class_id = fields[0].parse().map_err(|_| err(format!("class `{}` is not a non-negative integer", fields[0])))?;
        let mut v = [0.0; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| err(format!("`{f}` is not a finite number")))?;
        }
        out.push(Detection { class_id, score: v[0], bbox: Rect::new(v[1], v[2], v[3], v[4]) });
    }
    Ok(out)
}

pub fn write_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    Ok(std::fs::write(path, format_detections(dets))?)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    parse_detections(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_empty() {
        let dets = vec![
            Detection { class_id: 2, score: 0.123_456_7, bbox: Rect::new(1.0, 2.5, 100.333_333_3, 50.0) },
            Detection { class_id: 0, score: 1.0, bbox: Rect::new(0.0, 0.0, 576.0, 320.0) },
        ];
        let back = parse_detections(&format_detections(&dets)).unwrap();
        for (a, b) in dets.iter().zip(&back) {
            assert_eq!(a.class_id, b.class_id);
            assert!((a.score - b.score).abs() <= 1e-6);
            assert!((a.bbox.x2 - b.bbox.x2).abs() <= 1e-6);
        }
        assert_eq!(format_detections(&[]), "");
        assert!(parse_detections("").unwrap().is_empty());
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(parse_detections("0 0.5 1 2 3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_detections("0 0.5 1 2 3 4\nx 0.5 1 2 3 4\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_detections("0 nan 1 2 3 4\n"), Err(Error::Parse { line: 1, .. })));
    }
}
