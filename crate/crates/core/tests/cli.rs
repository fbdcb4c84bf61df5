use std::path::Path;

use tinyrcnn::cli::{rectangle_pixels, run};
use tinyrcnn::dataset::{load_manifest, load_ppm, Split};
use tinyrcnn::geometry::BBox;
use tinyrcnn::training::{load_checkpoint, LOSS_CSV_HEADER};

fn tinyrcnn(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["tinyrcnn"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

const SMALL_MODEL: &[&str] = &[
    "--backbone-channels",
    "4,8,8,8",
    "--rpn-channels",
    "8",
    "--hidden",
    "16",
    "--rpn-batch",
    "32",
    "--head-batch",
    "8",
];

fn generate(dir: &Path, images: &str) {
    let out = dir.to_str().unwrap();
    let (code, stdout, stderr) = tinyrcnn(&[
        "generate-data",
        "--out",
        out,
        "--images",
        images,
        "--seed",
        "5",
    ]);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("manifest.tsv"));
}

fn train(dir: &Path, iterations: &str) -> String {
    let manifest = dir.join("manifest.tsv");
    let ckpt = dir.join("model.ckpt");
    let mut args = vec![
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--iterations",
        iterations,
        "--lr",
        "1e-2",
    ];
    args.extend_from_slice(SMALL_MODEL);
    let (code, stdout, stderr) = tinyrcnn(&args);
    assert_eq!(code, 0, "{stderr}");
    stdout
}

#[test]
fn help_and_usage_errors() {
    let (code, out, _) = tinyrcnn(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("generate-data") && out.contains("benchmark"));
    assert_eq!(tinyrcnn(&[]).0, 1);
    assert_eq!(tinyrcnn(&["frobnicate"]).0, 1);
    assert_eq!(tinyrcnn(&["detect", "--image", "x.ppm"]).0, 1);
    assert_eq!(
        tinyrcnn(&[
            "train",
            "--manifest",
            "m",
            "--out",
            "o",
            "--iterations",
            "x"
        ])
        .0,
        1
    );
}

#[test]
fn missing_inputs_are_data_errors() {
    let (code, _, err) = tinyrcnn(&[
        "detect",
        "--ckpt",
        "/no/such.ckpt",
        "--image",
        "/no/such.ppm",
    ]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"));
    let (code, _, _) = tinyrcnn(&[
        "eval",
        "--replay-ground-truth",
        "--manifest",
        "/no/such.tsv",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = tinyrcnn(&[
        "generate-data",
        "--out",
        dir.path().to_str().unwrap(),
        "--classes",
        "11",
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn generate_data_writes_split_manifest() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "50");
    let m = load_manifest(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(m.records.len(), 50);
    assert_eq!(m.records_in(Split::Train).len(), 40);
    assert_eq!(m.classes, ["bar", "circle", "triangle"]);
    assert!(dir.path().join("annotations.tsv").exists());
    for r in &m.records {
        assert!(m.image_path(r).exists());
    }
}

#[test]
fn replayed_ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "20");
    let manifest = dir.path().join("manifest.tsv");
    let (code, out, err) = tinyrcnn(&[
        "eval",
        "--replay-ground-truth",
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("accuracy: 1.0000"), "{out}");
    let (code, out, _) = tinyrcnn(&[
        "eval",
        "--replay-ground-truth",
        "--manifest",
        manifest.to_str().unwrap(),
        "--tsv",
    ]);
    assert_eq!(code, 0);
    let all = out.lines().find(|l| l.starts_with("all\t")).unwrap();
    assert!(all.ends_with("\t1.000000"), "{all}");
}

#[test]
fn train_detect_eval_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "10");
    let stdout = train(dir.path(), "6");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("step ")).count(), 6);

    let ckpt = dir.path().join("model.ckpt");
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.iteration, 6);
    assert_eq!(loaded.history.len(), 6);
    let csv = std::fs::read_to_string(dir.path().join("model.ckpt.loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(LOSS_CSV_HEADER));
    assert_eq!(csv.lines().count(), 7);

    let image = dir.path().join("img_00000.ppm");
    let annotated = dir.path().join("annotated.ppm");
    let (code, out, err) = tinyrcnn(&[
        "detect",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--threshold",
        "0",
        "--annotate",
        annotated.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let mut boxes = Vec::new();
    for line in out.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 3, "{line}");
        assert!(["bar", "circle", "triangle"].contains(&f[0]));
        let conf: f64 = f[1].parse().unwrap();
        assert!((0.0..1.0).contains(&conf));
        let c: Vec<f64> = f[2].split(' ').map(|v| v.parse().unwrap()).collect();
        boxes.push(BBox::new(c[0], c[1], c[2], c[3]).unwrap());
    }
    // annotation only touches rectangle outlines
    let (before, after) = (load_ppm(&image).unwrap(), load_ppm(&annotated).unwrap());
    let (h, w) = (before.shape()[1], before.shape()[2]);
    let outline: std::collections::HashSet<(usize, usize)> = boxes
        .iter()
        .flat_map(|b| rectangle_pixels(b, w, h, 2))
        .collect();
    for y in 0..h {
        for x in 0..w {
            let changed = (0..3).any(|c| before.at(&[c, y, x]) != after.at(&[c, y, x]));
            assert!(
                !changed || outline.contains(&(x, y)),
                "pixel ({x},{y}) changed off an outline"
            );
        }
    }

    let manifest = dir.path().join("manifest.tsv");
    let (code, out, err) = tinyrcnn(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("accuracy:") && out.contains("confusion"));

    let (code, out, err) = tinyrcnn(&[
        "benchmark",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--runs",
        "3",
        "--warmup",
        "1",
    ]);
    assert_eq!(code, 0, "{err}");
    for stage in [
        "backbone",
        "rpn_proposals",
        "roi_head",
        "stage_sum",
        "end_to_end_median",
    ] {
        assert!(
            out.lines().any(|l| l.starts_with(&format!("{stage}\t"))),
            "{stage} missing:\n{out}"
        );
    }
}

#[test]
fn zero_iterations_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "5");
    train(dir.path(), "0");
    let ckpt = load_checkpoint(dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ckpt.iteration, 0);
    assert!(ckpt.history.is_empty());
}

#[test]
fn rectangle_pixels_form_an_outline() {
    let b = BBox::new(2.0, 3.0, 10.0, 9.0).unwrap();
    let px = rectangle_pixels(&b, 20, 20, 2);
    // 8x6 box minus its 4x2 interior
    assert_eq!(px.len(), 48 - 8);
    assert!(px.contains(&(2, 3)) && px.contains(&(9, 8)) && !px.contains(&(5, 6)));
    let clipped = rectangle_pixels(&BBox::new(-5.0, -5.0, 3.0, 3.0).unwrap(), 20, 20, 2);
    assert!(clipped.iter().all(|&(x, y)| x < 3 && y < 3));
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn generate_data_is_byte_identical_per_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(a.path(), "12");
    generate(b.path(), "12");
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 14);
    assert_eq!(ta, tb);
}

#[test]
fn unwritable_output_fails_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = blocker.join("sub");
    let (code, _, err) = tinyrcnn(&[
        "generate-data",
        "--out",
        out.to_str().unwrap(),
        "--images",
        "2",
    ]);
    assert_ne!(code, 0);
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn unknown_flags_and_missing_manifest() {
    assert_eq!(
        tinyrcnn(&["generate-data", "--out", "x", "--colour", "red"]).0,
        1
    );
    let (code, _, err) = tinyrcnn(&[
        "train",
        "--manifest",
        "/no/such/manifest.tsv",
        "--out",
        "/tmp/never.ckpt",
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn threshold_one_gives_no_detections_and_runs_are_counted() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "4");
    train(dir.path(), "2");
    let ckpt = dir.path().join("model.ckpt");
    let image = dir.path().join("img_00001.ppm");
    let (code, out, err) = tinyrcnn(&[
        "detect",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--threshold",
        "1.0",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.is_empty(), "{out}");
    let (code, out, _) = tinyrcnn(&[
        "benchmark",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--runs",
        "5",
    ]);
    assert_eq!(code, 0);
    let runs = out.split("run\tms\n").nth(1).unwrap();
    assert_eq!(runs.lines().count(), 5);
}
