//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Takes roughly ten minutes, dominated by two full toy trainings.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use tinyrcnn::dataset::{
    generate_synthetic, load_sample, split, Annotation, DatasetManifest, Sample, Split,
    SyntheticSceneSpec,
};
use tinyrcnn::detector::{detect, roi_pool, DetectorConfig, Model, Proposal};
use tinyrcnn::evaluation::{benchmark_latency, evaluate, EvalConfig};
use tinyrcnn::geometry::{decode, encode, generate_anchors, iou, nms, AnchorConfig, ScoredBox};
use tinyrcnn::tensor::{seeded_rng, Tensor};
use tinyrcnn::training::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, trailing_mean,
    training_samples, LossBreakdown, TrainConfig, Trainer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const TOY_SEED: u64 = 7;
const TOY_IMAGES: usize = 200;
const TOY_ITERATIONS: usize = 2000;

fn toy_model_config() -> DetectorConfig {
    DetectorConfig {
        input_w: 256,
        input_h: 256,
        ..DetectorConfig::default()
    }
}

fn toy_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        max_iterations: TOY_ITERATIONS,
        seed: TOY_SEED,
        ..TrainConfig::default()
    };
    cfg.sgd.learning_rate = 1e-2;
    cfg.warmup_iterations = 200;
    cfg
}

fn train_toy(manifest: &DatasetManifest) -> (Model, Vec<LossBreakdown>) {
    let model = Model::new(toy_model_config(), manifest.classes.clone(), 1).unwrap();
    let samples = training_samples(manifest, &model).unwrap();
    let mut trainer = Trainer::new(model, toy_train_config()).unwrap();
    trainer.run(&samples, None, |_, _| {}).unwrap();
    let history = trainer.history().to_vec();
    (trainer.model, history)
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, _) in common::OPS {
        let e = common::op_worst_error(name);
        if e > worst_op.1 {
            worst_op = (name, e);
        }
    }
    let (checked, e2e) = common::end_to_end_worst_error();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_op.1 < 1e-4 && e2e < 1e-3 && checked >= 100 && secs < 120.0,
        format!(
            "{} ops x {} cases, worst {:.2e} ({}); end-to-end {checked} weights, worst {e2e:.2e}; {secs:.1}s",
            common::OPS.len(),
            common::CASES,
            worst_op.1,
            worst_op.0
        ),
    )
}

fn anchor_formula() -> Outcome {
    let cfg = AnchorConfig::default();
    let mut rng = seeded_rng(1);
    let mut sizes: Vec<(usize, usize)> = (0..30)
        .map(|_| (rng.gen_range(16..1200), rng.gen_range(16..1200)))
        .collect();
    sizes.push((640, 480));
    let bad: Vec<_> = sizes
        .iter()
        .filter(|&&(w, h)| generate_anchors(w, h, &cfg).unwrap().len() != (w / 16) * (h / 16) * 12)
        .collect();
    let n640 = generate_anchors(640, 480, &cfg).unwrap().len();
    outcome(
        bad.is_empty() && n640 == 14400,
        format!(
            "{} sizes checked, {} mismatches; 640x480 -> {n640}",
            sizes.len(),
            bad.len()
        ),
    )
}

fn geometry_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = seeded_rng(2);
    let mut iou_err: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (
            common::lattice_box(&mut rng, 30),
            common::lattice_box(&mut rng, 30),
        );
        iou_err = iou_err.max((iou(&a, &b) - common::raster_iou(&a, &b)).abs());
    }
    let mut nms_mismatch = 0;
    for _ in 0..200 {
        let n = rng.gen_range(0..=500);
        let boxes: Vec<ScoredBox> = (0..n)
            .map(|_| {
                let score = f64::from(rng.gen_range(0..50u32)) / 50.0;
                ScoredBox::new(common::lattice_box(&mut rng, 60), score).unwrap()
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][rng.gen_range(0..3)];
        if nms(&boxes, thr, None) != common::brute_nms(&boxes, thr) {
            nms_mismatch += 1;
        }
    }
    let mut codec_err: f64 = 0.0;
    for _ in 0..1000 {
        let (gt, anchor) = (
            common::lattice_box(&mut rng, 200),
            common::lattice_box(&mut rng, 200),
        );
        let back = decode(&encode(&gt, &anchor), &anchor).unwrap();
        for (x, y) in [
            (back.xmin, gt.xmin),
            (back.ymin, gt.ymin),
            (back.xmax, gt.xmax),
            (back.ymax, gt.ymax),
        ] {
            codec_err = codec_err.max((x - y).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        iou_err < 1e-6 && nms_mismatch == 0 && codec_err < 1e-9 && secs < 60.0,
        format!(
            "IoU vs raster max err {iou_err:.1e} (1000); NMS mismatches {nms_mismatch}/200; decode(encode) max err {codec_err:.1e}; {secs:.1}s"
        ),
    )
}

fn roi_pooling() -> Outcome {
    let mut rng = seeded_rng(3);
    let fmap = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng).unwrap();
    let mut wrong = 0;
    for _ in 0..1000 {
        let p = Proposal {
            bbox: common::lattice_box(&mut rng, 100),
            objectness: 0.5,
        };
        let (oh, ow) = (rng.gen_range(1..=7), rng.gen_range(1..=7));
        if roi_pool(&fmap, &p, oh, ow, 16).unwrap().shape() != [4, oh, ow] {
            wrong += 1;
        }
    }
    let quad = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let p = Proposal {
        bbox: tinyrcnn::geometry::BBox::new(0.0, 0.0, 64.0, 64.0).unwrap(),
        objectness: 1.0,
    };
    let pooled = roi_pool(&quad, &p, 2, 2, 16).unwrap();
    let quad_ok = pooled.data() == [5.0, 7.0, 13.0, 15.0];
    outcome(
        wrong == 0 && quad_ok,
        format!(
            "1000 random proposals, {wrong} wrong shapes; quadrants {:?}",
            pooled.data()
        ),
    )
}

fn toy_data(dir: &Path) -> DatasetManifest {
    let spec = SyntheticSceneSpec::with_classes(3).unwrap();
    let m = generate_synthetic(&spec, TOY_IMAGES, TOY_SEED, dir).unwrap();
    split(&m, 0.8, TOY_SEED).unwrap()
}

fn toy_run(manifest: &DatasetManifest) -> (Outcome, Model) {
    let t0 = Instant::now();
    let (model, history) = train_toy(manifest);
    let train_secs = t0.elapsed().as_secs_f64();
    let initial = history[0].total;
    let trailing = trailing_mean(&history, 100).unwrap_or(f64::INFINITY);
    let report = evaluate(&model, manifest, &EvalConfig { iou_min: 0.5 }).unwrap();
    let (_, rerun) = train_toy(manifest);
    let identical = rerun.len() == history.len()
        && rerun
            .iter()
            .zip(&history)
            .all(|(a, b)| a.parts().map(f64::to_bits) == b.parts().map(f64::to_bits));
    let secs = t0.elapsed().as_secs_f64();
    let pass = trailing < 0.3 * initial
        && report.images == 40
        && report.accuracy >= 0.9
        && identical
        && secs < 1800.0;
    (
        outcome(
            pass,
            format!(
                "loss {initial:.3} -> trailing-100 {trailing:.3} ({:.1}%); accuracy {:.3} ({}/{} boxes, {} test images); rerun bit-identical: {identical}; train {train_secs:.0}s, total {secs:.0}s",
                100.0 * trailing / initial,
                report.accuracy,
                report.matched,
                report.total_ground_truth,
                report.images,
            ),
        ),
        model,
    )
}

fn fixture(manifest: &DatasetManifest, model: &Model) -> Sample {
    let record: &Annotation = manifest.records_in(Split::Test)[0];
    let c = &model.config;
    load_sample(manifest, record, c.input_w, c.input_h, c.stride()).unwrap()
}

fn checkpoint_round_trip(model: &Model, sample: &Sample, dir: &Path) -> Outcome {
    let path = dir.join("toy.ckpt");
    let ckpt = tinyrcnn::training::Checkpoint {
        model: model.clone(),
        velocity: vec![],
        iteration: TOY_ITERATIONS as u64,
        history: vec![],
    };
    save_checkpoint(&ckpt, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let second = encode_checkpoint(&loaded).unwrap();
    let identical = first == second && decode_checkpoint(&second).unwrap().model == *model;
    let before = detect(&sample.image, model).unwrap();
    let after = detect(&sample.image, &loaded.model).unwrap();
    outcome(
        identical && before == after,
        format!(
            "{} bytes, re-save identical: {identical}; {} detections before, {} after, equal: {}",
            first.len(),
            before.len(),
            after.len(),
            before == after
        ),
    )
}

fn benchmark_stability(model: &Model, sample: &Sample) -> Outcome {
    let a = benchmark_latency(model, &sample.image, 3, 20).unwrap();
    let b = benchmark_latency(model, &sample.image, 3, 20).unwrap();
    let (ma, mb) = (a.stats.median, b.stats.median);
    let drift = (mb - ma).abs() / ma;
    let gap = |r: &tinyrcnn::evaluation::LatencyReport| {
        (r.stage_sum_ms() - r.stats.mean).abs() / r.stats.mean
    };
    let (ga, gb) = (gap(&a), gap(&b));
    outcome(
        drift <= 0.2 && ga <= 0.05 && gb <= 0.05,
        format!(
            "median {ma:.2} ms then {mb:.2} ms ({:+.1}%); stage sum off total by {:.2}% / {:.2}%",
            100.0 * (mb - ma) / ma,
            100.0 * ga,
            100.0 * gb
        ),
    )
}

fn split_determinism() -> Outcome {
    let m = DatasetManifest {
        classes: vec!["a".into()],
        records: (0..100)
            .map(|i| Annotation {
                image: format!("{i}.ppm").into(),
                objects: vec![],
            })
            .collect(),
        splits: None,
        seed: None,
        root: ".".into(),
    };
    let a = split(&m, 0.8, 11).unwrap();
    let b = split(&m, 0.8, 11).unwrap();
    let (train, test) = (
        a.records_in(Split::Train).len(),
        a.records_in(Split::Test).len(),
    );
    outcome(
        train == 80 && test == 20 && a.splits == b.splits,
        format!(
            "{train}/{test}, same assignment on repeat: {}",
            a.splits == b.splits
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("gradient suite", gradient_suite()),
        ("anchor formula", anchor_formula()),
        ("geometry oracles", geometry_oracles()),
        ("roi pooling", roi_pooling()),
    ];
    let manifest = toy_data(dir.path());
    let (toy, model) = toy_run(&manifest);
    results.push(("toy training run", toy));
    let sample = fixture(&manifest, &model);
    results.push((
        "checkpoint round-trip",
        checkpoint_round_trip(&model, &sample, dir.path()),
    ));
    results.push(("benchmark stability", benchmark_stability(&model, &sample)));
    results.push(("split determinism", split_determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
