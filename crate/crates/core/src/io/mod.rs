//! File formats: network config text, weights, images, labels, detections and anchors.

mod anchors;
mod config;
mod dataset;
mod dets;
mod image;
mod kitti;
mod weights;

pub use anchors::{fit_anchors, mean_best_iou, MAX_ITERATIONS};
pub use config::{load_config, parse_config, save_config, serialize_config};
pub use dataset::{list_files, load_dataset, save_dataset};
pub use dets::{format_detections, parse_detections, read_detections, write_detections};
pub use image::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, load_pgm, load_ppm, resize_bilinear, save_pgm, save_ppm};
pub use kitti::{format_kitti_labels, load_kitti_labels, parse_kitti_labels, DONT_CARE};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, MAGIC, VERSION};
