//! Training directories: `images/<stem>.ppm` next to `labels/<stem>.txt` (KITTI text).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{GtBox, ImageLabels};
use crate::tensor::Shape;
use crate::train::{Sample, Target};

use super::image::{load_ppm, resize_bilinear, save_ppm};
use super::kitti::{format_kitti_labels, load_kitti_labels};

/// Files with `extension` directly inside `dir`, sorted by name.
pub fn list_files(dir: impl AsRef<Path>, extension: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == extension))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Load every image with its labels, resized to `input`. Boxes are clipped to
/// the image, scaled with it and normalised; DontCare regions are dropped.
pub fn load_dataset<S: AsRef<str>>(dir: impl AsRef<Path>, input: Shape, class_names: &[S]) -> Result<Vec<(String, Sample)>> {
    let dir = dir.as_ref();
    let images = list_files(dir.join("images"), "ppm")?;
    if images.is_empty() {
        return Err(Error::Argument(format!("no .ppm images under {}", dir.join("images").display())));
    }
    images
        .iter()
        .map(|path| {
            let name = stem(path);
            let raw = load_ppm(path)?;
            let labels = load_kitti_labels(dir.join("labels").join(format!("{name}.txt")), class_names)?;
            let (w, h) = (raw.width() as f64, raw.height() as f64);
            let image = if raw.height() == input.height && raw.width() == input.width { raw } else { resize_bilinear(&raw, input.height, input.width)? };
            let targets = labels
                .objects
                .iter()
                .map(|g| g.bbox.clip(w, h))
                .zip(&labels.objects)
                .filter(|(b, _)| !b.is_degenerate())
                .map(|(b, g)| Target::from_rect(g.class_id, &b, w, h))
                .collect();
            Ok((name, Sample { image, targets }))
        })
        .collect()
}

/// Write samples as `images/NNNNNN.ppm` and `labels/NNNNNN.txt`.
pub fn save_dataset<S: AsRef<str>>(dir: impl AsRef<Path>, samples: &[Sample], class_names: &[S]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:06}");
        save_ppm(&s.image, dir.join("images").join(format!("{name}.ppm")))?;
        let (w, h) = (s.image.width() as f64, s.image.height() as f64);
        let labels = ImageLabels { objects: s.targets.iter().map(|t| GtBox::new(t.class_id, t.to_rect(w, h))).collect(), dont_care: Vec::new() };
        std::fs::write(dir.join("labels").join(format!("{name}.txt")), format_kitti_labels(&labels, class_names))?;
    }
    Ok(())
}
