use std::fmt;
use std::str::FromStr;

use crate::detect::AnchorSet;
use crate::error::{config_err, Error, Result};
use crate::tensor::Shape;

use super::{NetDescription, NetworkSpec, Stage};

/// The three detector layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Single track: Front, four Tinier modules, one detection at 1/32 resolution.
    Reference,
    /// Reference plus a high-resolution track fusing Tin.3 with upsampled Tin.4.
    MffdA,
    /// Both detections placed after the Tin.3/Tin.4 fusion.
    MffdB,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Reference, Variant::MffdA, Variant::MffdB];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Reference => "ref",
            Variant::MffdA => "mffd_a",
            Variant::MffdB => "mffd_b",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ref" | "reference" => Ok(Variant::Reference),
            "mffd_a" | "mffd-a" | "a" => Ok(Variant::MffdA),
            "mffd_b" | "mffd-b" | "b" => Ok(Variant::MffdB),
            other => Err(config_err!("unknown variant `{other}` (expected ref, mffd_a or mffd_b)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantOptions {
    pub classes: usize,
    pub boxes: usize,
    pub input: Shape,
    /// Every filter count is divided by this (minimum 1 filter).
    pub width_divisor: usize,
    pub anchors: Option<AnchorSet>,
}

impl Default for VariantOptions {
    fn default() -> Self {
        VariantOptions { classes: 3, boxes: 5, input: Shape::new(3, 320, 576), width_divisor: 1, anchors: None }
    }
}

impl VariantOptions {
    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn with_boxes(mut self, boxes: usize) -> Self {
        self.boxes = boxes;
        self
    }

    pub fn with_input(mut self, input: Shape) -> Self {
        self.input = input;
        self
    }

    pub fn with_width_divisor(mut self, divisor: usize) -> Self {
        self.width_divisor = divisor;
        self
    }
}

/// Stage list of a variant, before expansion.
pub fn variant_description(variant: Variant, opts: &VariantOptions) -> Result<NetDescription> {
    if opts.classes == 0 || opts.boxes == 0 {
        return Err(config_err!("need at least one class and one box, got C={} B={}", opts.classes, opts.boxes));
    }
    if opts.width_divisor == 0 {
        return Err(config_err!("width divisor must be positive"));
    }
    let s = opts.input;
    if s.height % 32 != 0 || s.width % 32 != 0 || s.is_empty() {
        return Err(config_err!("input {}×{} must be divisible by 32 in both dimensions", s.height, s.width));
    }
    let f = |n: usize| (n / opts.width_divisor).max(1);
    let tinier = |name: &str, n1: usize, n3: usize| Stage::Tinier { name: name.into(), n1: f(n1), n3: f(n3) };
    let detect = |name: &str| Stage::Detect { name: name.into(), boxes: opts.boxes, classes: opts.classes };
    let tin4_n3 = if variant == Variant::MffdB { 512 } else { 1024 };

    let mut stages = vec![
        Stage::Front { filters: [f(64), f(64), f(128)] },
        tinier("Tin.1", 16, 128),
        Stage::MaxPool,
        tinier("Tin.2", 32, 256),
        Stage::MaxPool,
        tinier("Tin.3", 64, 512),
        Stage::MaxPool,
        tinier("Tin.4", 128, tin4_n3),
    ];
    let fusion = [
        Stage::Upsample { from: "Tin.4".into() },
        Stage::Concat { a: "Tin.3".into(), b: "Tin.4.up".into() },
        tinier("Fuse.hi", 128, 512),
    ];
    match variant {
        Variant::Reference => stages.push(detect("det_low")),
        Variant::MffdA => {
            stages.push(detect("det_low"));
            stages.extend(fusion);
            stages.push(detect("det_high"));
        }
        Variant::MffdB => {
            stages.extend(fusion);
            stages.push(detect("det_high"));
            stages.push(Stage::MaxPool);
            stages.push(tinier("Fuse.lo", 128, 1024));
            stages.push(detect("det_low"));
        }
    }
    Ok(NetDescription { input: s, anchors: opts.anchors.clone(), stages })
}

/// Build one of the three detectors.
pub fn build_variant(variant: Variant, opts: &VariantOptions) -> Result<NetworkSpec> {
    variant_description(variant, opts)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::LayerKind;

    #[test]
    fn detect_filters_follow_boxes_and_classes() {
        let voc = build_variant(Variant::Reference, &VariantOptions::default().with_classes(20)).unwrap();
        assert_eq!(voc.shape_of("det_low").unwrap().channels, 125);
        let kitti = build_variant(Variant::Reference, &VariantOptions::default()).unwrap();
        assert_eq!(kitti.shape_of("det_low").unwrap().channels, 40);
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let opts = VariantOptions::default().with_input(Shape::new(3, 320, 570));
        assert!(matches!(build_variant(Variant::Reference, &opts), Err(Error::Config(_))));
        assert!(build_variant(Variant::MffdA, &VariantOptions::default().with_classes(0)).is_err());
    }

    #[test]
    fn smallest_input_gives_single_cell() {
        let opts = VariantOptions::default().with_input(Shape::new(3, 32, 32));
        let spec = build_variant(Variant::Reference, &opts).unwrap();
        let tap = &spec.detect_taps()[0];
        assert_eq!((tap.grid_height, tap.grid_width), (1, 1));
    }

    #[test]
    fn fusion_concat_widths() {
        for (variant, widths) in [(Variant::MffdA, [512, 1024]), (Variant::MffdB, [512, 512])] {
            let spec = build_variant(variant, &VariantOptions::default()).unwrap();
            let cat = spec.nodes().iter().find(|n| n.kind == LayerKind::Concat).unwrap();
            let got: Vec<usize> = cat.inputs.iter().map(|i| spec.shape_of(i).unwrap().channels).collect();
            assert_eq!(got, widths);
            assert_eq!(spec.shape_of(&cat.id).unwrap(), Shape::new(widths[0] + widths[1], 20, 36));
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("ref".parse::<Variant>().unwrap(), Variant::Reference);
        assert_eq!("MFFD_B".parse::<Variant>().unwrap(), Variant::MffdB);
        assert!("yolo".parse::<Variant>().is_err());
    }
}
