//! Command-line front end: data generation, training, detection,
//! evaluation and benchmarking.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{
    generate_synthetic, load_manifest, load_ppm, prepare_input, save_manifest, save_ppm, split,
    SyntheticSceneSpec,
};
use crate::detector::{detect, BackboneConfig, DetectorConfig, Model, ProposalConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    benchmark_latency, evaluate, format_latency_tsv, format_report_text, format_report_tsv,
    EvalConfig, GroundTruthReplay,
};
use crate::geometry::{AnchorConfig, BBox};
use crate::tensor::{SgdConfig, Tensor};
use crate::training::{load_checkpoint, training_samples, write_loss_csv, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(
    name = "tinyrcnn",
    version,
    about = "Two-stage object detector: data, training, detection, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic shapes dataset with annotations and a train/test manifest.
    GenerateData(GenerateArgs),
    /// Train a detector on a manifest's training split.
    Train(TrainArgs),
    /// Run a checkpoint on one PPM image.
    Detect(DetectArgs),
    /// Accuracy report on a manifest's test split.
    Eval(EvalArgs),
    /// Per-image latency of a checkpoint.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    /// Fraction of images assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model input width; images are resized to it.
    #[arg(long, default_value_t = 128)]
    pub input_width: usize,
    #[arg(long, default_value_t = 128)]
    pub input_height: usize,
    /// Output channels of each conv/relu/maxpool block.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    pub backbone_channels: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub anchor_stride: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2")]
    pub anchor_scales: Vec<f64>,
    /// Height-to-width ratios.
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
    pub anchor_ratios: Vec<f64>,
    #[arg(long, default_value_t = 64.0)]
    pub anchor_base: f64,
    #[arg(long, default_value_t = 64)]
    pub rpn_channels: usize,
    #[arg(long, default_value_t = 4)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 600)]
    pub pre_nms: usize,
    #[arg(long, default_value_t = 64)]
    pub post_nms: usize,
    #[arg(long, default_value_t = 0.7)]
    pub proposal_nms: f64,
    #[arg(long, default_value_t = 4.0)]
    pub min_proposal_size: f64,
    #[arg(long, default_value_t = 0.5)]
    pub confidence_threshold: f64,
    #[arg(long, default_value_t = 0.3)]
    pub class_nms: f64,
}

impl ModelArgs {
    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            input_w: self.input_width,
            input_h: self.input_height,
            anchors: AnchorConfig {
                stride: self.anchor_stride,
                scales: self.anchor_scales.clone(),
                ratios: self.anchor_ratios.clone(),
                base_size: self.anchor_base,
            },
            backbone: BackboneConfig::blocks(&self.backbone_channels),
            rpn_channels: self.rpn_channels,
            pool_h: self.pool_size,
            pool_w: self.pool_size,
            hidden: self.hidden,
            proposals: ProposalConfig {
                pre_nms_n: self.pre_nms,
                post_nms_n: self.post_nms,
                nms_threshold: self.proposal_nms,
                min_size: self.min_proposal_size,
            },
            confidence_threshold: self.confidence_threshold,
            class_nms_threshold: self.class_nms,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Fraction of iterations after which the learning rate drops tenfold.
    #[arg(long, default_value_t = 0.75)]
    pub lr_decay_at: f64,
    /// Steps of linear learning-rate warmup.
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 256)]
    pub rpn_batch: usize,
    #[arg(long, default_value_t = 0.5)]
    pub rpn_fg_fraction: f64,
    #[arg(long, default_value_t = 0.7)]
    pub rpn_fg_iou: f64,
    #[arg(long, default_value_t = 0.3)]
    pub rpn_bg_iou: f64,
    #[arg(long, default_value_t = 32)]
    pub head_batch: usize,
    #[arg(long, default_value_t = 0.25)]
    pub head_fg_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub head_fg_iou: f64,
    #[arg(long, default_value_t = 0.5)]
    pub head_bg_iou: f64,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Stop once the trailing-window mean loss falls below this value.
    #[arg(long)]
    pub stop_loss: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub stop_window: usize,
    /// Loss history CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Suppress the per-step loss lines.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_iterations: self.iterations,
            sgd: SgdConfig {
                learning_rate: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            lr_decay_at: self.lr_decay_at,
            warmup_iterations: self.warmup,
            rpn_batch: self.rpn_batch,
            rpn_fg_fraction: self.rpn_fg_fraction,
            rpn_fg_iou: self.rpn_fg_iou,
            rpn_bg_iou: self.rpn_bg_iou,
            head_batch: self.head_batch,
            head_fg_fraction: self.head_fg_fraction,
            head_fg_iou: self.head_fg_iou,
            head_bg_iou: self.head_bg_iou,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            stop_loss: self.stop_loss,
            stop_window: self.stop_window,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Overrides the checkpoint's confidence threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Writes a copy of the image with 2-pixel rectangles around detections.
    #[arg(long)]
    pub annotate: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "replay_ground_truth")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Emit TSV instead of the text report.
    #[arg(long)]
    pub tsv: bool,
    /// Evaluate a stub that reports the ground truth itself.
    #[arg(long, conflicts_with = "ckpt")]
    pub replay_ground_truth: bool,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSceneSpec {
        width: a.width,
        height: a.height,
        ..SyntheticSceneSpec::with_classes(a.classes)?
    };
    let manifest = generate_synthetic(&spec, a.images, a.seed, &a.out)?;
    let manifest = split(&manifest, a.train_ratio, a.seed)?;
    let path = a.out.join("manifest.tsv");
    save_manifest(&manifest, &path)?;
    writeln!(
        out,
        "wrote {} images ({} boxes) and {}",
        manifest.records.len(),
        manifest.box_count(),
        path.display()
    )
    .map_err(out_err)
}

fn default_loss_csv(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let cfg = a.train_config();
    let model = Model::new(a.model.detector_config(), manifest.classes.clone(), a.seed)?;
    let samples = training_samples(&manifest, &model)?;
    let mut trainer = Trainer::new(model, cfg)?;
    let quiet = a.quiet;
    let mut io_error = None;
    let result = trainer.run(&samples, Some(&a.out), |i, b| {
        if quiet || io_error.is_some() {
            return;
        }
        if let Err(e) = writeln!(
            out,
            "step {i}\trpn_cls {:.6}\trpn_reg {:.6}\thead_cls {:.6}\thead_reg {:.6}\ttotal {:.6}",
            b.rpn_cls, b.rpn_reg, b.head_cls, b.head_reg, b.total
        ) {
            io_error = Some(e);
        }
    });
    let csv = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| default_loss_csv(&a.out));
    write_loss_csv(trainer.history(), &csv)?;
    result?;
    if let Some(e) = io_error {
        return Err(out_err(e));
    }
    writeln!(
        out,
        "saved {} after {} steps",
        a.out.display(),
        trainer.iteration()
    )
    .map_err(out_err)
}

/// Pixels of a `thickness`-wide rectangle drawn just inside `b`, clipped to
/// the image.
pub fn rectangle_pixels(
    b: &BBox,
    width: usize,
    height: usize,
    thickness: usize,
) -> Vec<(usize, usize)> {
    let clamp = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n);
    let (x0, x1) = (clamp(b.xmin, width), clamp(b.xmax, width));
    let (y0, y1) = (clamp(b.ymin, height), clamp(b.ymax, height));
    let mut px = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if x < x0 + thickness
                || x + thickness >= x1
                || y < y0 + thickness
                || y + thickness >= y1
            {
                px.push((x, y));
            }
        }
    }
    px
}

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.3, 0.5, 1.0],
    [1.0, 0.9, 0.1],
    [1.0, 0.3, 1.0],
    [0.1, 1.0, 1.0],
];

fn draw_box(image: &mut Tensor, b: &BBox, color: [f64; 3]) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = image.data_mut();
    for (x, y) in rectangle_pixels(b, w, h, 2) {
        for (c, &v) in color.iter().enumerate() {
            data[(c * h + y) * w + x] = v;
        }
    }
}

fn detect_cmd(a: &DetectArgs, out: &mut dyn Write) -> Result<()> {
    let mut model = load_checkpoint(&a.ckpt)?.model;
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("threshold {t} not in [0, 1]")));
        }
        model.config.confidence_threshold = t;
    }
    let raw = load_ppm(&a.image)?;
    let cfg = &model.config;
    let (input, (fx, fy)) = prepare_input(&raw, cfg.input_w, cfg.input_h, cfg.stride())?;
    let dets = detect(&input, &model)?;
    let mut annotated = raw.clone();
    for d in &dets {
        let b = d.bbox.scaled(1.0 / fx, 1.0 / fy)?;
        writeln!(
            out,
            "{}\t{:.6}\t{:.3} {:.3} {:.3} {:.3}",
            model.classes[d.class_id], d.confidence, b.xmin, b.ymin, b.xmax, b.ymax
        )
        .map_err(out_err)?;
        draw_box(&mut annotated, &b, PALETTE[d.class_id % PALETTE.len()]);
    }
    if let Some(p) = &a.annotate {
        save_ppm(&annotated, p)?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let cfg = EvalConfig { iou_min: a.iou };
    let report = match &a.ckpt {
        Some(p) => evaluate(&load_checkpoint(p)?.model, &manifest, &cfg)?,
        None => {
            let d = DetectorConfig::default();
            let replay = GroundTruthReplay {
                classes: manifest.classes.clone(),
                input_w: d.input_w,
                input_h: d.input_h,
                stride: d.stride(),
            };
            evaluate(&replay, &manifest, &cfg)?
        }
    };
    let text = if a.tsv {
        format_report_tsv(&report)
    } else {
        format_report_text(&report)
    };
    out.write_all(text.as_bytes()).map_err(out_err)
}

fn benchmark_cmd(a: &BenchmarkArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?.model;
    let raw = load_ppm(&a.image)?;
    let cfg = &model.config;
    let (input, _) = prepare_input(&raw, cfg.input_w, cfg.input_h, cfg.stride())?;
    let report = benchmark_latency(&model, &input, a.warmup, a.runs)?;
    let mut s = format_latency_tsv(&report);
    s.push_str("\nrun\tms\n");
    for (i, ms) in report.samples_ms.iter().enumerate() {
        s.push_str(&format!("{}\t{ms:.4}\n", i + 1));
    }
    out.write_all(s.as_bytes()).map_err(out_err)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenerateData(a) => generate(a, out),
        Command::Train(a) => train(a, out),
        Command::Detect(a) => detect_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Benchmark(a) => benchmark_cmd(a, out),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
