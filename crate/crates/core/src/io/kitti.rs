//! KITTI object label text: one object per line, at least 15 fields.
//!
//! `type truncated occluded alpha x1 y1 x2 y2 h w l x y z rotation_y [score]`

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{GtBox, ImageLabels, Rect};

pub const DONT_CARE: &str = "DontCare";
const MIN_FIELDS: usize = 15;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Parse label text, keeping `class_names` (matched case-sensitively) and
/// `DontCare` regions; every other type is dropped.
pub fn parse_kitti_labels<S: AsRef<str>>(text: &str, class_names: &[S]) -> Result<ImageLabels> {
    let mut labels = ImageLabels::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < MIN_FIELDS {
            return Err(parse_err(line, format!("expected at least {MIN_FIELDS} fields, found {}", fields.len())));
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|_| parse_err(line, format!("field {} `{}` is not a number", i + 1, fields[i])));
        let bbox = Rect::new(num(4)?, num(5)?, num(6)?, num(7)?);
        if !(bbox.x2 >= bbox.x1 && bbox.y2 >= bbox.y1) {
            return Err(parse_err(line, format!("box {bbox:?} has negative extent")));
        }
        let kind = fields[0];
        if kind == DONT_CARE {
            labels.dont_care.push(bbox);
            continue;
        }
        let Some(class_id) = class_names.iter().position(|c| c.as_ref() == kind) else { continue };
        let truncation = num(1)?;
        if !(0.0..=1.0).contains(&truncation) {
            return Err(parse_err(line, format!("truncation {truncation} outside [0, 1]")));
        }
        let occlusion: u8 = fields[2].parse().ok().filter(|o| *o <= 3).ok_or_else(|| parse_err(line, format!("occlusion `{}` is not 0–3", fields[2])))?;
        labels.objects.push(GtBox { class_id, bbox, truncation, occlusion });
    }
    Ok(labels)
}

/// Label text for `labels`, with unknown 3D fields. Reads back through [`parse_kitti_labels`].
pub fn format_kitti_labels<S: AsRef<str>>(labels: &ImageLabels, class_names: &[S]) -> String {
    let mut out = String::new();
    let mut line = |kind: &str, trunc: f64, occ: i32, alpha: f64, b: &Rect| {
        writeln!(out, "{kind} {trunc:.2} {occ} {alpha:.2} {:.2} {:.2} {:.2} {:.2} -1 -1 -1 -1000 -1000 -1000 -10", b.x1, b.y1, b.x2, b.y2).unwrap();
    };
    for g in &labels.objects {
        line(class_names[g.class_id].as_ref(), g.truncation, g.occlusion as i32, -10.0, &g.bbox);
    }
    for r in &labels.dont_care {
        line(DONT_CARE, -1.0, -1, -10.0, r);
    }
    out
}

pub fn load_kitti_labels<S: AsRef<str>>(path: impl AsRef<Path>, class_names: &[S]) -> Result<ImageLabels> {
    parse_kitti_labels(&std::fs::read_to_string(path)?, class_names)
}
