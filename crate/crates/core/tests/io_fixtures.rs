use mffd::eval::{Rect, KITTI_CLASSES};
use mffd::io;
use mffd::netgraph::{build_variant, count_stored_values, variant_description, Variant, VariantOptions, WeightStore};
use mffd::synth::{synth_dataset, SynthConfig};
use mffd::Error;

const GOLDEN: [(Variant, &str); 3] = [
    (Variant::Reference, include_str!("golden/ref.cfg")),
    (Variant::MffdA, include_str!("golden/mffd-a.cfg")),
    (Variant::MffdB, include_str!("golden/mffd-b.cfg")),
];

#[test]
fn variant_configs_match_golden_files() {
    let opts = VariantOptions::default().with_classes(20);
    for (v, golden) in GOLDEN {
        let desc = variant_description(v, &opts).unwrap();
        assert_eq!(io::serialize_config(&desc), golden, "{v}");
        let parsed = io::parse_config(golden).unwrap().build().unwrap();
        assert_eq!(parsed.shapes(), build_variant(v, &opts).unwrap().shapes());
    }
}

#[test]
fn weights_file_layout_and_round_trip() {
    let spec = build_variant(Variant::MffdA, &VariantOptions::default().with_width_divisor(8)).unwrap();
    let store = WeightStore::init(&spec, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.mffd");
    io::save_weights(&store, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MFFD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    assert_eq!(count, count_stored_values(&spec));
    assert_eq!(bytes.len() as u64, 16 + 4 * count);
    assert_eq!(io::load_weights(&path, &spec).unwrap(), store);

    let other = build_variant(Variant::Reference, &VariantOptions::default().with_width_divisor(8)).unwrap();
    assert!(matches!(io::load_weights(&path, &other), Err(Error::Load(_))));
    assert!(matches!(io::decode_weights(&bytes[..bytes.len() - 3], &spec), Err(Error::Format { .. })));
}

const KITTI_FIXTURE: &str = "\
Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59
Pedestrian 0.30 1 0.21 423.17 173.67 433.17 224.03 1.60 0.46 0.63 -5.39 1.66 20.95 -0.04
DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10
Van 0.00 0 -1.55 385.24 172.13 431.70 204.01 1.90 1.89 4.49 -6.89 1.74 31.77 -1.76
";

#[test]
fn kitti_labels_fixture() {
    let l = io::parse_kitti_labels(KITTI_FIXTURE, &KITTI_CLASSES).unwrap();
    assert_eq!(l.objects.len(), 2);
    assert_eq!(l.objects[0].class_id, 0);
    assert_eq!(l.objects[0].bbox, Rect::new(587.01, 173.33, 614.12, 200.12));
    assert_eq!((l.objects[1].class_id, l.objects[1].occlusion), (1, 1));
    assert!((l.objects[1].truncation - 0.3).abs() < 1e-12);
    assert_eq!(l.dont_care, vec![Rect::new(503.89, 169.71, 590.61, 190.13)]);
    let again = io::parse_kitti_labels(&io::format_kitti_labels(&l, &KITTI_CLASSES), &KITTI_CLASSES).unwrap();
    assert_eq!(again, l);
    let bad = "Car 0.0 0 0 1 2 3\n";
    assert!(matches!(io::parse_kitti_labels(bad, &KITTI_CLASSES), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn dataset_round_trip() {
    let cfg = SynthConfig { images: 3, small_images: 1, ..SynthConfig::default() };
    let samples = synth_dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    io::save_dataset(dir.path(), &samples, &KITTI_CLASSES).unwrap();
    let loaded = io::load_dataset(dir.path(), samples[0].image.shape(), &KITTI_CLASSES).unwrap();
    assert_eq!(loaded.len(), 3);
    for ((_, got), want) in loaded.iter().zip(&samples) {
        assert!(got.image.max_abs_diff(&want.image) <= 0.5 / 255.0 + 1e-6);
        assert_eq!(got.targets.len(), want.targets.len());
        for (a, b) in got.targets.iter().zip(&want.targets) {
            assert_eq!(a.class_id, b.class_id);
            assert!((a.cx - b.cx).abs() < 1e-3 && (a.w - b.w).abs() < 1e-3);
        }
    }
}

#[test]
fn detection_files_round_trip() {
    let dets = vec![mffd::detect::Detection { bbox: Rect::new(1.5, 2.0, 30.25, 40.0), class_id: 2, score: 0.875 }];
    let text = io::format_detections(&dets);
    assert_eq!(text, "2 0.875000 1.500000 2.000000 30.250000 40.000000\n");
    assert_eq!(io::parse_detections(&text).unwrap(), dets);
}
