use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mffd::detect::{objectness_heatmap, Heatmap};
use mffd::eval::{evaluate, Difficulty, EvalConfig, ImageLabels, KITTI_CLASSES};
use mffd::io;
use mffd::netgraph::{
    build_variant, count_all_trainables, count_params, forward_outputs, module_rows, variant_description, NetworkSpec, Variant, VariantOptions,
    WeightStore,
};
use mffd::pipeline::{bench, detect_image, DetectParams};
use mffd::synth::{synth_dataset, SynthConfig};
use mffd::tensor::{Shape, Tensor};
use mffd::train::{train_with, SgdConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "mffd", version, about = "Lightweight modular feature fusion detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-module convolution weight counts.
    Params(VariantArgs),
    /// Output shape of every module and layer.
    Shapes(ShapesArgs),
    /// Print the config text of a built-in variant.
    Config(VariantArgs),
    /// Write seeded initial weights for a config.
    Init(InitArgs),
    /// Detect objects in one PPM image.
    Infer(InferArgs),
    /// Train on a directory of images and KITTI labels.
    Train(TrainArgs),
    /// Score detection files against label files.
    Eval(EvalArgs),
    /// Time forward passes.
    Bench(BenchArgs),
    /// Fit anchor priors to label boxes.
    Anchors(AnchorArgs),
    /// Write a synthetic rectangle dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantName {
    Ref,
    MffdA,
    MffdB,
}

impl From<VariantName> for Variant {
    fn from(v: VariantName) -> Self {
        match v {
            VariantName::Ref => Variant::Reference,
            VariantName::MffdA => Variant::MffdA,
            VariantName::MffdB => Variant::MffdB,
        }
    }
}

#[derive(Args)]
struct VariantArgs {
    #[arg(long, value_enum)]
    variant: VariantName,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    boxes: usize,
    /// Divide every filter count by this factor.
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
}

impl VariantArgs {
    fn options(&self) -> VariantOptions {
        VariantOptions::default().with_classes(self.classes).with_boxes(self.boxes).with_width_divisor(self.width_divisor)
    }

    fn spec(&self) -> mffd::Result<NetworkSpec> {
        build_variant(self.variant.into(), &self.options())
    }
}

#[derive(Args)]
struct ShapesArgs {
    #[arg(long, value_enum, required_unless_present = "config", conflicts_with = "config")]
    variant: Option<VariantName>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    boxes: usize,
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.45)]
    nms: f64,
    /// Detection file to write; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Objectness map (max over anchors and scales) at image size.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory with images/*.ppm and labels/*.txt.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    seed: u64,
    /// Start from these weights instead of a seeded initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "weights.mffd")]
    out: PathBuf,
    #[arg(long, default_value = "loss.log")]
    log: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long)]
    no_augment: bool,
    /// Drop the learning rate after as many steps as the recipe takes on this many images,
    /// instead of scaling the drop epochs to --epochs.
    #[arg(long)]
    reference_images: Option<usize>,
    /// Write `<out>.epochN` every this many epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Comma-separated class names in class-id order.
    #[arg(long, value_delimiter = ',', default_values_t = KITTI_CLASSES.map(String::from))]
    class_names: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of detection files, one `<image>.txt` per image.
    #[arg(long)]
    dets: PathBuf,
    /// Directory of KITTI label files.
    #[arg(long)]
    labels: PathBuf,
    /// IoU 0.7 for cars and 0.5 otherwise, with difficulty levels (default).
    #[arg(long, conflicts_with = "voc")]
    kitti: bool,
    /// IoU 0.5 for every class, no difficulty filter.
    #[arg(long)]
    voc: bool,
    #[arg(long, default_value = "moderate")]
    difficulty: Difficulty,
    /// Write `<class>.csv` precision-recall curves here.
    #[arg(long)]
    pr_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = KITTI_CLASSES.map(String::from))]
    class_names: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Weights file; a seeded initialisation is timed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    iters: usize,
}

#[derive(Args)]
struct AnchorArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Width and height of the labelled images in pixels.
    #[arg(long, num_args = 2, value_names = ["W", "H"], default_values_t = [1242.0, 375.0])]
    image_size: Vec<f64>,
    /// Columns and rows of the coarsest detect grid.
    #[arg(long, num_args = 2, value_names = ["COLS", "ROWS"], default_values_t = [18.0, 10.0])]
    grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = KITTI_CLASSES.map(String::from))]
    class_names: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<mffd::Error>() {
                Some(mffd::Error::Argument(_)) => ExitCode::from(1),
                Some(_) => ExitCode::from(2),
                None if e.is::<std::io::Error>() => ExitCode::from(2),
                None => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Params(a) => params(&a),
        Command::Shapes(a) => shapes(&a),
        Command::Config(a) => {
            print!("{}", io::serialize_config(&variant_description(a.variant.into(), &a.options())?));
            Ok(())
        }
        Command::Init(a) => {
            let spec = io::load_config(&a.config)?;
            io::save_weights(&WeightStore::init(&spec, a.seed), &a.out)?;
            Ok(())
        }
        Command::Infer(a) => infer(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench_cmd(&a),
        Command::Anchors(a) => anchors(&a),
        Command::Synth(a) => {
            let samples = synth_dataset(&SynthConfig { images: a.images, seed: a.seed, ..SynthConfig::default() });
            io::save_dataset(&a.out, &samples, &KITTI_CLASSES)?;
            Ok(())
        }
    }
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn table_output(row: &mffd::netgraph::ModuleRow) -> Shape {
    // Modules followed by a pool are listed with the pooled map, except Tin.3,
    // which is listed before its pool because the fusion branch taps it there.
    match row.pooled {
        Some(p) if row.name != "Tin.3" => p,
        _ => row.output,
    }
}

fn module_label(name: &str) -> &str {
    if name.starts_with("det") {
        "Det."
    } else {
        name
    }
}

fn params(a: &VariantArgs) -> Result<()> {
    let spec = a.spec()?;
    let report = count_params(&spec);
    let mut out = String::new();
    writeln!(out, "{:<10} {:>16}  {:<26} {:>6} {:>6} {:>12}", "Module", "Output size", "Filter size/stride", "N1x1", "N3x3", "Param.")?;
    let s = spec.input_shape();
    writeln!(out, "{:<10} {:>16}  {:<26} {:>6} {:>6} {:>12}", "Input", s.hwc(), "N/A", "N/A", "N/A", "N/A")?;
    for row in module_rows(&spec) {
        let filters: Vec<String> = row.convs.iter().map(|(k, st, _)| format!("{k}x{k}/{st}")).collect();
        let n1: Vec<String> = row.convs.iter().filter(|c| c.0 == 1).map(|c| c.2.to_string()).collect();
        let n3: Vec<String> = row.convs.iter().filter(|c| c.0 == 3).map(|c| c.2.to_string()).collect();
        let summarize = |v: Vec<String>| {
            let mut v = v;
            v.dedup();
            if v.is_empty() {
                "0".to_string()
            } else {
                v.join("/")
            }
        };
        let mut filters_dedup = filters.clone();
        filters_dedup.dedup();
        let filter_text = if filters.len() == 4 && filters_dedup.len() == 4 && filters[0] == filters[2] && filters[1] == filters[3] {
            format!("[{} {}] x2", filters[0], filters[1])
        } else {
            filters.join(" ")
        };
        writeln!(
            out,
            "{:<10} {:>16}  {:<26} {:>6} {:>6} {:>12}",
            module_label(&row.name),
            table_output(&row).hwc(),
            filter_text,
            summarize(n1),
            summarize(n3),
            thousands(row.params)
        )?;
    }
    writeln!(out, "{:<10} {:>16}  {:<26} {:>6} {:>6} {:>12}", "Total", "", "", "", "", thousands(report.total))?;
    writeln!(out, "\ntrainable values (with bias and batch norm): {}", thousands(count_all_trainables(&spec)))?;
    print!("{out}");
    Ok(())
}

fn shapes(a: &ShapesArgs) -> Result<()> {
    let spec = match (&a.config, a.variant) {
        (Some(path), _) => io::load_config(path)?,
        (None, Some(v)) => {
            let opts = VariantOptions::default().with_classes(a.classes).with_boxes(a.boxes).with_width_divisor(a.width_divisor);
            build_variant(v.into(), &opts)?
        }
        (None, None) => bail!("either --variant or --config is required"),
    };
    let mut out = String::new();
    writeln!(out, "{:<10} {:>16} {:>16}", "Module", "Output size", "Module output")?;
    writeln!(out, "{:<10} {:>16} {:>16}", "Input", spec.input_shape().hwc(), spec.input_shape().hwc())?;
    for row in module_rows(&spec) {
        writeln!(out, "{:<10} {:>16} {:>16}", module_label(&row.name), table_output(&row).hwc(), row.output.hwc())?;
    }
    writeln!(out)?;
    writeln!(out, "{:<16} {:<12} {:>16}", "Layer", "Kind", "Output")?;
    for node in spec.nodes() {
        let kind = format!("{:?}", node.kind);
        let kind = kind.split([' ', '{']).next().unwrap_or_default().to_string();
        writeln!(out, "{:<16} {:<12} {:>16}", node.id, kind, spec.shape_of(&node.id).unwrap().hwc())?;
    }
    print!("{out}");
    Ok(())
}

fn load_image_for(spec: &NetworkSpec, path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let raw = io::load_ppm(path)?;
    let s = spec.input_shape();
    let resized = io::resize_bilinear(&raw, s.height, s.width)?;
    Ok((raw, resized))
}

fn infer(a: &InferArgs) -> Result<()> {
    let spec = io::load_config(&a.config)?;
    let weights = io::load_weights(&a.weights, &spec)?;
    let (raw, image) = load_image_for(&spec, &a.image)?;
    let params = DetectParams { conf: a.conf, nms: a.nms };
    let (sx, sy) = (raw.width() as f64 / image.width() as f64, raw.height() as f64 / image.height() as f64);
    let dets: Vec<_> = detect_image(&spec, &weights, &image, params)?
        .into_iter()
        .map(|mut d| {
            d.bbox = d.bbox.scale(sx, sy);
            d
        })
        .collect();
    match &a.out {
        Some(path) => io::write_detections(&dets, path)?,
        None => print!("{}", io::format_detections(&dets)),
    }
    if let Some(path) = &a.heatmap {
        let outputs = forward_outputs(&spec, &weights, &image)?;
        let (h, w) = (raw.height(), raw.width());
        let mut combined = Heatmap { height: h, width: w, values: vec![0.0; h * w] };
        for tap in spec.detect_taps() {
            let map = objectness_heatmap(outputs.get(&tap.id).unwrap(), &spec.anchors_for(&tap))?.upscale(h, w);
            for (c, v) in combined.values.iter_mut().zip(map.values) {
                *c = c.max(v);
            }
        }
        fs::write(path, io::encode_pgm(w, h, &combined.to_gray())?)?;
    }
    eprintln!("{} detections", dets.len());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let spec = io::load_config(&a.config)?;
    let classes = spec.detect_taps().first().map(|t| t.classes).unwrap_or(0);
    if a.class_names.len() != classes {
        bail!("the network predicts {classes} classes but {} class names were given", a.class_names.len());
    }
    let data: Vec<_> = io::load_dataset(&a.data, spec.input_shape(), &a.class_names)?.into_iter().map(|(_, s)| s).collect();
    let init = match &a.resume {
        Some(path) => io::load_weights(path, &spec)?,
        None => WeightStore::init(&spec, a.seed),
    };
    let recipe = SgdConfig { base_lr: a.lr, batch_size: a.batch, ..SgdConfig::default() };
    let sgd = match a.reference_images {
        Some(n) => recipe.step_matched(data.len(), n, a.epochs.max(1)),
        None => recipe.scaled_to(a.epochs.max(1)),
    };
    let cfg = TrainConfig { sgd, seed: a.seed, augment: !a.no_augment, checkpoint_every: a.checkpoint_every, ..TrainConfig::default() };
    let mut log = std::io::BufWriter::new(fs::File::create(&a.log).with_context(|| format!("creating {}", a.log.display()))?);
    let mut log_error = None;
    let out = a.out.clone();
    let outcome = train_with(
        &spec,
        init,
        &data,
        &cfg,
        |epoch, w| io::save_weights(w, out.with_extension(format!("epoch{epoch}"))),
        |record| {
            if let Err(e) = writeln!(log, "{record}") {
                log_error.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    log.flush()?;
    io::save_weights(&outcome.weights, &a.out)?;
    if let Some(last) = outcome.log.last() {
        eprintln!("{} iterations, final loss {:.6}", last.iteration, last.loss);
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = if a.voc { EvalConfig::voc(&a.class_names) } else { EvalConfig::kitti(a.difficulty) };
    let mut labels = BTreeMap::new();
    for path in io::list_files(&a.labels, "txt")? {
        let key = path.file_stem().unwrap().to_string_lossy().into_owned();
        labels.insert(key, io::load_kitti_labels(&path, &cfg.class_names)?);
    }
    let mut dets = BTreeMap::new();
    for path in io::list_files(&a.dets, "txt")? {
        let key = path.file_stem().unwrap().to_string_lossy().into_owned();
        dets.insert(key, io::read_detections(&path)?);
    }
    if labels.is_empty() {
        return Err(mffd::Error::Load(format!("no label files in {}", a.labels.display())).into());
    }
    let report = evaluate(&dets, &labels, &cfg)?;
    print!("{}", report.table());
    if let Some(dir) = &a.pr_dir {
        fs::create_dir_all(dir)?;
        for c in &report.classes {
            fs::write(dir.join(format!("{}.csv", c.name)), report.pr_csv(&c.name).unwrap())?;
        }
    }
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let spec = io::load_config(&a.config)?;
    let weights = match &a.weights {
        Some(path) => io::load_weights(path, &spec)?,
        None => WeightStore::init(&spec, 0),
    };
    let r = bench(&spec, &weights, a.iters)?;
    println!("iterations {}", r.iterations);
    println!("mean_ms {:.3}", r.mean_ms);
    println!("min_ms {:.3}", r.min_ms);
    println!("fps {:.2}", r.fps());
    Ok(())
}

fn anchors(a: &AnchorArgs) -> Result<()> {
    let (img_w, img_h) = (a.image_size[0], a.image_size[1]);
    let (cols, rows) = (a.grid[0], a.grid[1]);
    let mut sizes = Vec::new();
    for path in io::list_files(&a.labels, "txt")? {
        let labels: ImageLabels = io::load_kitti_labels(&path, &a.class_names)?;
        sizes.extend(labels.objects.iter().filter(|g| !g.bbox.is_degenerate()).map(|g| (g.bbox.width() / img_w * cols, g.bbox.height() / img_h * rows)));
    }
    let fitted = io::fit_anchors(&sizes, a.k, a.seed)?;
    let priors: Vec<String> = fitted.priors().iter().map(|(w, h)| format!("{w:.4},{h:.4}")).collect();
    println!("anchors {}", priors.join(" "));
    eprintln!("mean best IoU {:.4} over {} boxes", io::mean_best_iou(&sizes, &fitted), sizes.len());
    Ok(())
}
