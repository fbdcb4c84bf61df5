//! Matching detections to ground truth, accuracy reports and latency
//! measurement.

mod latency;

pub use latency::{benchmark_latency, format_latency_tsv, LatencyReport, LatencyStats};

use std::fmt::Write as _;
use std::time::Instant;

use crate::dataset::{load_sample, DatasetManifest, Sample, Split};
use crate::detector::{detect, Detection, Model};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    /// `(detection, ground truth)` pairs in the order they were made.
    pub pairs: Vec<(usize, usize)>,
    /// Ground-truth index matched by each detection.
    pub det_to_gt: Vec<Option<usize>>,
    pub gt_to_det: Vec<Option<usize>>,
}

impl Matching {
    pub fn matched(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_positives(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.det_to_gt.len()).filter(|&i| self.det_to_gt[i].is_none())
    }
}

/// Indices of `dets` by descending confidence; ties keep input order.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy matching: detections in descending confidence each take the
/// unmatched same-class ground truth of highest IoU, if that IoU reaches
/// `iou_min`. Ties in IoU go to the lower ground-truth index.
pub fn match_detections(
    dets: &[Detection],
    gt: &[(usize, BBox)],
    iou_min: f64,
) -> Result<Matching> {
    if !(iou_min > 0.0 && iou_min <= 1.0) {
        return Err(Error::Config(format!("iou_min {iou_min} not in (0, 1]")));
    }
    let mut m = Matching {
        pairs: Vec::new(),
        det_to_gt: vec![None; dets.len()],
        gt_to_det: vec![None; gt.len()],
    };
    for d in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, (class, b)) in gt.iter().enumerate() {
            if m.gt_to_det[j].is_some() || *class != dets[d].class_id {
                continue;
            }
            let v = iou(&dets[d].bbox, b);
            if v >= iou_min && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            m.pairs.push((d, j));
            m.det_to_gt[d] = Some(j);
            m.gt_to_det[j] = Some(d);
        }
    }
    Ok(m)
}

/// Something that produces detections for a prepared sample.
pub trait DetectionModel {
    fn classes(&self) -> &[String];
    /// `(width, height, stride)` that samples are prepared at.
    fn input_geometry(&self) -> (usize, usize, usize);
    fn predict(&self, sample: &Sample) -> Result<Vec<Detection>>;
}

impl DetectionModel for Model {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn input_geometry(&self) -> (usize, usize, usize) {
        (
            self.config.input_w,
            self.config.input_h,
            self.config.stride(),
        )
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<Detection>> {
        detect(&sample.image, self)
    }
}

/// Reports each sample's ground truth with confidence 1.
#[derive(Clone, Debug)]
pub struct GroundTruthReplay {
    pub classes: Vec<String>,
    pub input_w: usize,
    pub input_h: usize,
    pub stride: usize,
}

impl DetectionModel for GroundTruthReplay {
    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn input_geometry(&self) -> (usize, usize, usize) {
        (self.input_w, self.input_h, self.stride)
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<Detection>> {
        Ok(sample
            .boxes
            .iter()
            .zip(&sample.labels)
            .map(|(&bbox, &class_id)| Detection {
                bbox,
                class_id,
                confidence: 1.0,
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassStats {
    pub ground_truth: usize,
    pub matched: usize,
    pub false_positives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub iou_min: f64,
    pub images: usize,
    pub per_class: Vec<ClassStats>,
    pub total_ground_truth: usize,
    pub matched: usize,
    pub false_positives: usize,
    /// Matched ground truth over all ground truth.
    pub accuracy: f64,
    pub mean_confidence: Option<f64>,
    pub min_confidence: Option<f64>,
    /// `(K+1)×(K+1)`, rows are the true class and columns the prediction;
    /// index `K` is background.
    pub confusion: Vec<Vec<usize>>,
    /// Wall-clock time per image of the predict call.
    pub latency: Option<LatencyStats>,
    /// Images whose prediction failed, with the error text.
    pub failures: Vec<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_min: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_min: 0.5 }
    }
}

/// Accumulates matching results image by image.
#[derive(Clone, Debug)]
pub struct EvalAccumulator {
    k: usize,
    iou_min: f64,
    images: usize,
    per_class: Vec<ClassStats>,
    confusion: Vec<Vec<usize>>,
    confidences: Vec<f64>,
    failures: Vec<(String, String)>,
    times_ms: Vec<f64>,
}

impl EvalAccumulator {
    pub fn new(n_classes: usize, iou_min: f64) -> Self {
        EvalAccumulator {
            k: n_classes,
            iou_min,
            images: 0,
            per_class: vec![ClassStats::default(); n_classes],
            confusion: vec![vec![0; n_classes + 1]; n_classes + 1],
            confidences: Vec::new(),
            failures: Vec::new(),
            times_ms: Vec::new(),
        }
    }

    pub fn add_image(&mut self, dets: &[Detection], gt: &[(usize, BBox)]) -> Result<()> {
        let k = self.k;
        if let Some(d) = dets.iter().find(|d| d.class_id >= k) {
            return Err(Error::Index(format!(
                "detection class {} with {k} classes",
                d.class_id
            )));
        }
        if let Some((c, _)) = gt.iter().find(|(c, _)| *c >= k) {
            return Err(Error::Index(format!(
                "ground-truth class {c} with {k} classes"
            )));
        }
        let m = match_detections(dets, gt, self.iou_min)?;
        self.images += 1;
        for &(c, _) in gt {
            self.per_class[c].ground_truth += 1;
        }
        for &(d, g) in &m.pairs {
            let c = gt[g].0;
            self.per_class[c].matched += 1;
            self.confusion[c][c] += 1;
            self.confidences.push(dets[d].confidence);
        }
        // an unmatched detection over an unmatched ground truth of another
        // class is a confusion; everything else left over is background
        let mut gt_done: Vec<bool> = m.gt_to_det.iter().map(Option::is_some).collect();
        for d in confidence_order(dets) {
            if m.det_to_gt[d].is_some() {
                continue;
            }
            let pred = dets[d].class_id;
            self.per_class[pred].false_positives += 1;
            let mut best: Option<(usize, f64)> = None;
            for (j, (_, b)) in gt.iter().enumerate() {
                if gt_done[j] {
                    continue;
                }
                let v = iou(&dets[d].bbox, b);
                if v >= self.iou_min && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    gt_done[j] = true;
                    self.confusion[gt[j].0][pred] += 1;
                }
                None => self.confusion[k][pred] += 1,
            }
        }
        for (j, done) in gt_done.iter().enumerate() {
            if !done {
                self.confusion[gt[j].0][k] += 1;
            }
        }
        Ok(())
    }

    /// Counts an image whose prediction failed: its ground truth is missed.
    pub fn add_failure(&mut self, image: String, msg: String, gt: &[(usize, BBox)]) {
        self.images += 1;
        for &(c, _) in gt {
            if c < self.k {
                self.per_class[c].ground_truth += 1;
                self.confusion[c][self.k] += 1;
            }
        }
        self.failures.push((image, msg));
    }

    pub fn add_time_ms(&mut self, ms: f64) {
        self.times_ms.push(ms);
    }

    pub fn finish(self, classes: Vec<String>) -> EvalReport {
        let total: usize = self.per_class.iter().map(|c| c.ground_truth).sum();
        let matched: usize = self.per_class.iter().map(|c| c.matched).sum();
        let fp: usize = self.per_class.iter().map(|c| c.false_positives).sum();
        let n = self.confidences.len();
        EvalReport {
            classes,
            iou_min: self.iou_min,
            images: self.images,
            per_class: self.per_class,
            total_ground_truth: total,
            matched,
            false_positives: fp,
            accuracy: if total == 0 {
                0.0
            } else {
                matched as f64 / total as f64
            },
            mean_confidence: (n > 0).then(|| self.confidences.iter().sum::<f64>() / n as f64),
            min_confidence: self.confidences.iter().copied().reduce(f64::min),
            confusion: self.confusion,
            latency: LatencyStats::from_samples(&self.times_ms),
            failures: self.failures,
        }
    }
}

/// Records evaluated: the test split when the manifest has one, otherwise all.
pub fn evaluation_records(manifest: &DatasetManifest) -> Vec<usize> {
    match &manifest.splits {
        Some(s) => (0..manifest.records.len())
            .filter(|&i| s[i] == Split::Test)
            .collect(),
        None => (0..manifest.records.len()).collect(),
    }
}

pub fn evaluate(
    model: &dyn DetectionModel,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let records = evaluation_records(manifest);
    if records.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let classes = model.classes().to_vec();
    if classes != manifest.classes {
        return Err(Error::Config(format!(
            "model classes {:?} differ from dataset classes {:?}",
            classes, manifest.classes
        )));
    }
    let (w, h, stride) = model.input_geometry();
    let mut acc = EvalAccumulator::new(classes.len(), cfg.iou_min);
    for i in records {
        let record = &manifest.records[i];
        let name = record.image.display().to_string();
        let sample = load_sample(manifest, record, w, h, stride)?;
        let gt: Vec<(usize, BBox)> = sample
            .labels
            .iter()
            .copied()
            .zip(sample.boxes.iter().copied())
            .collect();
        let t0 = Instant::now();
        let result = model.predict(&sample);
        acc.add_time_ms(t0.elapsed().as_secs_f64() * 1e3);
        match result {
            Ok(dets) => acc.add_image(&dets, &gt)?,
            Err(e) => acc.add_failure(name, e.to_string(), &gt),
        }
    }
    Ok(acc.finish(classes))
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

pub fn format_report_text(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "images: {}", r.images);
    let _ = writeln!(s, "iou threshold: {}", r.iou_min);
    let _ = writeln!(
        s,
        "accuracy: {:.4} ({} of {} ground-truth boxes)",
        r.accuracy, r.matched, r.total_ground_truth
    );
    let _ = writeln!(s, "false positives: {}", r.false_positives);
    let _ = writeln!(
        s,
        "matched confidence: mean {} min {}",
        opt(r.mean_confidence),
        opt(r.min_confidence)
    );
    if let Some(l) = &r.latency {
        let _ = writeln!(
            s,
            "latency ms/image: min {:.3} median {:.3} mean {:.3} max {:.3}",
            l.min, l.median, l.mean, l.max
        );
    }
    let _ = writeln!(s, "per class:");
    for (name, c) in r.classes.iter().zip(&r.per_class) {
        let _ = writeln!(
            s,
            "  {name}: {} / {} matched, {} false positives",
            c.matched, c.ground_truth, c.false_positives
        );
    }
    let mut labels: Vec<&str> = r.classes.iter().map(String::as_str).collect();
    labels.push("background");
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max(5);
    let _ = writeln!(s, "confusion (rows true, columns predicted):");
    let _ = write!(s, "  {:width$}", "");
    for l in &labels {
        let _ = write!(s, " {l:>width$}");
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(&r.confusion) {
        let _ = write!(s, "  {l:width$}");
        for v in row {
            let _ = write!(s, " {v:>width$}");
        }
        s.push('\n');
    }
    for (img, msg) in &r.failures {
        let _ = writeln!(s, "failed: {img}: {msg}");
    }
    s
}

/// Per-class rows, an overall row, then the confusion matrix.
pub fn format_report_tsv(r: &EvalReport) -> String {
    let mut s = String::from("class\tground_truth\tmatched\tfalse_positives\taccuracy\n");
    for (name, c) in r.classes.iter().zip(&r.per_class) {
        let acc = if c.ground_truth == 0 {
            0.0
        } else {
            c.matched as f64 / c.ground_truth as f64
        };
        let _ = writeln!(
            s,
            "{name}\t{}\t{}\t{}\t{acc:.6}",
            c.ground_truth, c.matched, c.false_positives
        );
    }
    let _ = writeln!(
        s,
        "all\t{}\t{}\t{}\t{:.6}",
        r.total_ground_truth, r.matched, r.false_positives, r.accuracy
    );
    s.push('\n');
    s.push_str("true\\predicted");
    for c in r.classes.iter().map(String::as_str).chain(["background"]) {
        let _ = write!(s, "\t{c}");
    }
    s.push('\n');
    for (c, row) in r
        .classes
        .iter()
        .map(String::as_str)
        .chain(["background"])
        .zip(&r.confusion)
    {
        s.push_str(c);
        for v in row {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}
