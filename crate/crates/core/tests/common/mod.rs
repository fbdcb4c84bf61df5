//! Oracles shared by the test targets.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use tinyrcnn::dataset::Sample;
use tinyrcnn::detector::{BackboneConfig, DetectorConfig, Model, ProposalConfig};
use tinyrcnn::geometry::{iou, AnchorConfig, BBox, ScoredBox};
use tinyrcnn::tensor::{seeded_rng, FeatureRegion, Graph, Rng64, Tensor, Var};
use tinyrcnn::training::{loss_and_gradients, loss_for_plan, plan_step, TrainConfig};
use tinyrcnn::Result;

pub const CASES: usize = 100;
pub const H: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random(shape: &[usize], rng: &mut Rng64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Values spaced 0.05 apart, shuffled, so max-style ops have a
/// unique winner that a small perturbation cannot change.
fn distinct(shape: &[usize], rng: &mut Rng64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

/// Values bounded away from zero.
fn off_zero(shape: &[usize], rng: &mut Rng64) -> Tensor {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.1 } else { 0.1 };
        }
    }
    t
}

pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Projects the op output on fixed random weights so the whole Jacobian is
/// exercised, then compares analytic and numeric gradients for every input
/// element. Returns the largest relative error seen.
pub fn check(inputs: &[Tensor], build: &Build<'_>, rng: &mut Rng64) -> f64 {
    let forward = |ins: &[Tensor], weights: Option<&Tensor>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let mut out = build(&mut g, &vars).unwrap();
        if let Some(w) = weights {
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv).unwrap();
            out = g.sum(p).unwrap();
        }
        (g, vars, out)
    };
    let (g, _, out) = forward(inputs, None);
    let weights = (!g.value(out).is_scalar()).then(|| random(g.value(out).shape(), rng));
    let (mut g, vars, loss) = forward(inputs, weights.as_ref());
    g.backward(loss).unwrap();
    let value = |ins: &[Tensor]| {
        let (g, _, l) = forward(ins, weights.as_ref());
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).expect("input has no gradient");
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

pub type Case = (Vec<Tensor>, Box<Build<'static>>);

/// Worst relative error over `CASES` random cases of one op.
pub fn op_worst_error(name: &str) -> f64 {
    let case = OPS.iter().find(|(n, _)| *n == name).expect("unknown op").1;
    let mut rng = seeded_rng(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (inputs, build) = case(&mut rng);
        worst = worst.max(check(&inputs, &*build, &mut rng));
    }
    worst
}

pub const OPS: &[(&str, fn(&mut Rng64) -> Case)] = &[
    ("add", add_case),
    ("mul", mul_case),
    ("matmul", matmul_case),
    ("sum", sum_case),
    ("scale", scale_case),
    ("add_bias", add_bias_case),
    ("relu", relu_case),
    ("softmax", softmax_case),
    ("reshape", reshape_case),
    ("gather", gather_case),
    ("conv2d", conv2d_case),
    ("maxpool2d", maxpool2d_case),
    ("roi_pool", roi_pool_case),
    ("cross_entropy", cross_entropy_case),
    ("smooth_l1", smooth_l1_case),
    ("softmax+ce", composed_softmax_cross_entropy_case),
];

fn dims(rng: &mut Rng64, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn add_case(rng: &mut Rng64) -> Case {
    let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
    (
        vec![random(&s, rng), random(&s, rng)],
        Box::new(|g, v| g.add(v[0], v[1])),
    )
}

fn mul_case(rng: &mut Rng64) -> Case {
    let s = [dims(rng, 1, 5)];
    (
        vec![random(&s, rng), random(&s, rng)],
        Box::new(|g, v| g.mul(v[0], v[1])),
    )
}

fn matmul_case(rng: &mut Rng64) -> Case {
    let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
    (
        vec![random(&[m, k], rng), random(&[k, n], rng)],
        Box::new(|g, v| g.matmul(v[0], v[1])),
    )
}

fn sum_case(rng: &mut Rng64) -> Case {
    let s = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
    (vec![random(&s, rng)], Box::new(|g, v| g.sum(v[0])))
}

fn scale_case(rng: &mut Rng64) -> Case {
    let c = rng.gen_range(-3.0..3.0);
    let s = [dims(rng, 1, 6)];
    (
        vec![random(&s, rng)],
        Box::new(move |g, v| g.scale(v[0], c)),
    )
}

fn add_bias_case(rng: &mut Rng64) -> Case {
    let (r, n) = (dims(rng, 1, 4), dims(rng, 1, 4));
    (
        vec![random(&[r, n], rng), random(&[n], rng)],
        Box::new(|g, v| g.add_bias(v[0], v[1])),
    )
}

fn relu_case(rng: &mut Rng64) -> Case {
    let s = [dims(rng, 1, 4), dims(rng, 1, 4)];
    (vec![off_zero(&s, rng)], Box::new(|g, v| g.relu(v[0])))
}

fn softmax_case(rng: &mut Rng64) -> Case {
    let s = [dims(rng, 1, 4), dims(rng, 2, 5)];
    (vec![random(&s, rng)], Box::new(|g, v| g.softmax(v[0])))
}

fn reshape_case(rng: &mut Rng64) -> Case {
    let (a, b) = (dims(rng, 1, 4), dims(rng, 1, 4));
    (
        vec![random(&[a, b], rng)],
        Box::new(move |g, v| g.reshape(v[0], &[b, a])),
    )
}

fn gather_case(rng: &mut Rng64) -> Case {
    let n = dims(rng, 1, 8);
    let m = dims(rng, 1, 10);
    let index: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
    (
        vec![random(&[n], rng)],
        Box::new(move |g, v| g.gather(v[0], index.clone(), &[m])),
    )
}

fn conv2d_case(rng: &mut Rng64) -> Case {
    let (cin, cout) = (dims(rng, 1, 3), dims(rng, 1, 3));
    let k = dims(rng, 1, 3);
    let stride = dims(rng, 1, 2);
    let padding = rng.gen_range(0..k);
    let (h, w) = (dims(rng, k, 6), dims(rng, k, 6));
    (
        vec![
            random(&[cin, h, w], rng),
            random(&[cout, cin, k, k], rng),
            random(&[cout], rng),
        ],
        Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, padding)),
    )
}

fn maxpool2d_case(rng: &mut Rng64) -> Case {
    let window = dims(rng, 1, 3);
    let stride = dims(rng, 1, 2);
    let c = dims(rng, 1, 2);
    let (h, w) = (dims(rng, window, 7), dims(rng, window, 7));
    (
        vec![distinct(&[c, h, w], rng)],
        Box::new(move |g, v| g.maxpool2d(v[0], window, stride)),
    )
}

fn roi_pool_case(rng: &mut Rng64) -> Case {
    let c = dims(rng, 1, 2);
    let (h, w) = (dims(rng, 2, 6), dims(rng, 2, 6));
    let regions: Vec<FeatureRegion> = (0..dims(rng, 1, 3))
        .map(|_| {
            let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
            FeatureRegion {
                x0,
                y0,
                x1: rng.gen_range(x0 + 1..=w),
                y1: rng.gen_range(y0 + 1..=h),
            }
        })
        .collect();
    let (oh, ow) = (dims(rng, 1, 3), dims(rng, 1, 3));
    (
        vec![distinct(&[c, h, w], rng)],
        Box::new(move |g, v| g.roi_pool(v[0], &regions, oh, ow)),
    )
}

fn cross_entropy_case(rng: &mut Rng64) -> Case {
    let (n, k) = (dims(rng, 1, 4), dims(rng, 2, 5));
    let probs: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (
        vec![Tensor::new(&[n, k], probs).unwrap()],
        Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
    )
}

fn smooth_l1_case(rng: &mut Rng64) -> Case {
    let s = [dims(rng, 1, 4), 4];
    let pred = random(&s, rng);
    let mut target = random(&s, rng);
    // keep every difference away from the |d| = 1 seam
    for (t, p) in target.data_mut().iter_mut().zip(pred.data()) {
        if ((*t - p).abs() - 1.0).abs() < 0.05 {
            *t = p + 0.5;
        }
    }
    (vec![pred, target], Box::new(|g, v| g.smooth_l1(v[0], v[1])))
}

fn composed_softmax_cross_entropy_case(rng: &mut Rng64) -> Case {
    let (n, k) = (dims(rng, 1, 4), dims(rng, 2, 5));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (
        vec![random(&[n, k], rng)],
        Box::new(move |g, v| {
            let p = g.softmax(v[0])?;
            g.cross_entropy(p, &labels)
        }),
    )
}

pub fn tiny_model() -> Model {
    let cfg = DetectorConfig {
        input_w: 32,
        input_h: 32,
        anchors: AnchorConfig {
            stride: 8,
            scales: vec![0.5, 1.0],
            ratios: vec![0.5, 1.0, 2.0],
            base_size: 16.0,
        },
        backbone: BackboneConfig::blocks(&[3, 4, 4]),
        rpn_channels: 6,
        pool_h: 2,
        pool_w: 2,
        hidden: 8,
        proposals: ProposalConfig {
            pre_nms_n: 40,
            post_nms_n: 6,
            nms_threshold: 0.7,
            min_size: 1.0,
        },
        ..DetectorConfig::default()
    };
    Model::new(cfg, vec!["a".into(), "b".into()], 11).unwrap()
}

pub fn tiny_sample() -> Sample {
    let mut rng = seeded_rng(5);
    Sample {
        image: Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng).unwrap(),
        boxes: vec![
            BBox::new(4.0, 4.0, 20.0, 16.0).unwrap(),
            BBox::new(14.0, 12.0, 30.0, 30.0).unwrap(),
        ],
        labels: vec![0, 1],
        factors: (1.0, 1.0),
    }
}

/// Finite-difference check of the full detector loss on a fixed sampling
/// plan. Returns the number of parameters checked and the worst error.
pub fn end_to_end_worst_error() -> (usize, f64) {
    let model = tiny_model();
    let sample = tiny_sample();
    let cfg = TrainConfig {
        rpn_batch: 16,
        head_batch: 8,
        ..TrainConfig::default()
    };
    let plan = plan_step(&model, &sample, &cfg, 3).unwrap();
    assert!(!plan.rpn_deltas.is_empty() && !plan.roi_deltas.is_empty());
    let (_, grads) = loss_and_gradients(&model, &sample, &plan, cfg.weights).unwrap();

    let mut rng = seeded_rng(17);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (p, name) in model.params.names.iter().enumerate() {
        // every backbone tensor fully sampled, the rest spot-checked
        let n = model.params.tensors[p].len();
        let picks: Vec<usize> = if name.starts_with("backbone") {
            (0..n)
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, n.min(60))
                .copied()
                .collect()
        } else {
            (0..6).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let mut plus = model.clone();
            plus.params.tensors[p].data_mut()[i] += H;
            let mut minus = model.clone();
            minus.params.tensors[p].data_mut()[i] -= H;
            let fp = loss_for_plan(&plus, &sample, &plan, cfg.weights)
                .unwrap()
                .total;
            let fm = loss_for_plan(&minus, &sample, &plan, cfg.weights)
                .unwrap()
                .total;
            let numeric = (fp - fm) / (2.0 * H);
            let e = rel_err(grads[p].data()[i], numeric);
            worst = worst.max(e);
            checked += 1;
        }
    }
    (checked, worst)
}

/// A random box with quarter-pixel coordinates.
pub fn lattice_box(rng: &mut Rng64, max: u32) -> BBox {
    let (x, y) = (rng.gen_range(0..max * 4), rng.gen_range(0..max * 4));
    let (w, h) = (rng.gen_range(1..max * 2), rng.gen_range(1..max * 2));
    BBox::new(
        f64::from(x) / 4.0,
        f64::from(y) / 4.0,
        f64::from(x + w) / 4.0,
        f64::from(y + h) / 4.0,
    )
    .unwrap()
}

/// IoU by counting quarter-pixel cells; exact for boxes on that lattice.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let cell = |v: f64| (v * 4.0).round() as i64;
    let covers = |bx: &BBox, x: i64, y: i64| {
        x >= cell(bx.xmin) && x < cell(bx.xmax) && y >= cell(bx.ymin) && y < cell(bx.ymax)
    };
    let x_hi = cell(a.xmax.max(b.xmax));
    let y_hi = cell(a.ymax.max(b.ymax));
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..y_hi {
        for x in 0..x_hi {
            let (ia, ib) = (covers(a, x, y), covers(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

/// Repeatedly takes the best remaining box (earliest on score ties) and
/// strikes everything overlapping it by more than the threshold.
pub fn brute_nms(boxes: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let mut alive = vec![true; boxes.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| boxes[i].score > boxes[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(boxes[b]);
        for j in 0..boxes.len() {
            if alive[j] && iou(&boxes[b].bbox, &boxes[j].bbox) > thr {
                alive[j] = false;
            }
        }
        alive[b] = false;
    }
    out
}
