//! Training step, loop and stopping rule.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::loss::{compute_loss, LossBreakdown, LossVars, LossWeights, NetOutputs, StepPlan};
use super::targets::{
    assign_head_targets, assign_rpn_targets, sample_head_minibatch, sample_rpn_minibatch,
    AnchorLabel,
};
use crate::dataset::{load_sample, DatasetManifest, Sample, Split};
use crate::detector::{feature_region, generate_proposals, objectness_from_logits, Model, Net};
use crate::error::{Error, Result};
use crate::geometry::generate_anchors;
use crate::tensor::{seeded_rng, Graph, Sgd, SgdConfig, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub sgd: SgdConfig,
    /// Fraction of `max_iterations` after which the learning rate is decayed.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    /// Steps over which the learning rate ramps linearly up to its base value.
    pub warmup_iterations: usize,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub head_batch: usize,
    pub head_fg_fraction: f64,
    pub head_fg_iou: f64,
    /// Proposals below this IoU are head background; those between it and
    /// `head_fg_iou` are not sampled.
    pub head_bg_iou: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    pub stop_loss: Option<f64>,
    pub stop_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 2000,
            sgd: SgdConfig::default(),
            lr_decay_at: 0.75,
            lr_decay_factor: 0.1,
            warmup_iterations: 0,
            rpn_batch: 256,
            rpn_fg_fraction: 0.5,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            head_batch: 32,
            head_fg_fraction: 0.25,
            head_fg_iou: 0.5,
            head_bg_iou: 0.5,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: None,
            stop_loss: None,
            stop_window: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if self.rpn_batch < 2 || self.head_batch == 0 {
            return Err(Error::Config("batch sizes are too small".into()));
        }
        if !unit(self.rpn_fg_fraction) || !unit(self.head_fg_fraction) {
            return Err(Error::Config(
                "foreground fractions must lie in (0, 1]".into(),
            ));
        }
        if !(self.rpn_fg_iou > self.rpn_bg_iou)
            || !unit(self.head_fg_iou)
            || !(self.head_bg_iou > 0.0 && self.head_bg_iou <= self.head_fg_iou)
        {
            return Err(Error::Config("IoU thresholds are inconsistent".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay_factor >= 0.0) {
            return Err(Error::Config(
                "learning-rate decay settings are invalid".into(),
            ));
        }
        if self.stop_window == 0 || self.checkpoint_every == Some(0) {
            return Err(Error::Config(
                "stop window and checkpoint interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate for the zero-based `iteration`.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let decay_from = (self.lr_decay_at * self.max_iterations as f64).floor() as usize;
        if iteration >= decay_from {
            self.sgd.learning_rate * self.lr_decay_factor
        } else if iteration < self.warmup_iterations {
            self.sgd.learning_rate * (iteration + 1) as f64 / self.warmup_iterations as f64
        } else {
            self.sgd.learning_rate
        }
    }
}

fn mix(seed: u64, n: u64) -> u64 {
    let mut z = seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the minibatch draws of `iteration`.
pub fn step_seed(seed: u64, iteration: usize) -> u64 {
    mix(seed, 2 * iteration as u64)
}

/// Sample order for one pass over `n` images.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(mix(seed, 2 * epoch as u64 + 1)));
    order
}

fn image_size(sample: &Sample) -> Result<(usize, usize)> {
    let s = sample.image.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("sample image {s:?} is not [3,H,W]")));
    }
    Ok((s[2], s[1]))
}

fn make_plan(
    model: &Model,
    sample: &Sample,
    logits: &Tensor,
    deltas: &Tensor,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<StepPlan> {
    let (w, h) = image_size(sample)?;
    let anchors = generate_anchors(w, h, &model.config.anchors)?;
    let rpn = assign_rpn_targets(&anchors, &sample.boxes, cfg.rpn_fg_iou, cfg.rpn_bg_iou)?;
    let picked = sample_rpn_minibatch(&rpn, cfg.rpn_batch, cfg.rpn_fg_fraction, seed)?;
    let mut plan = StepPlan::default();
    for &i in &picked {
        let fg = rpn.labels[i] == AnchorLabel::Foreground;
        plan.rpn_anchors.push(i);
        plan.rpn_labels.push(fg as usize);
        if let (true, Some(d)) = (fg, rpn.deltas[i]) {
            plan.rpn_deltas.push((i, d));
        }
    }

    let objectness = objectness_from_logits(logits)?;
    let proposals =
        generate_proposals(&objectness, deltas, &anchors, w, h, &model.config.proposals)?;
    let boxes: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
    let head = assign_head_targets(&boxes, &sample.boxes, &sample.labels, cfg.head_fg_iou)?;
    let rows = sample_head_minibatch(
        &head,
        cfg.head_batch,
        cfg.head_fg_fraction,
        cfg.head_bg_iou,
        mix(seed, 1),
    );
    for &i in &rows {
        if let Some(d) = head.deltas[i] {
            plan.roi_deltas.push((plan.rois.len(), d));
        }
        plan.rois.push(head.rois[i]);
        plan.roi_labels.push(head.labels[i]);
    }
    Ok(plan)
}

struct Pass {
    graph: Graph,
    params: Vec<Var>,
    loss: LossVars,
    plan: StepPlan,
}

enum PlanSource<'a> {
    Fixed(&'a StepPlan),
    Sampled(&'a TrainConfig, u64),
}

fn run_pass(
    model: &Model,
    sample: &Sample,
    source: PlanSource,
    weights: LossWeights,
) -> Result<Pass> {
    let mut g = Graph::new();
    let net = Net::register(&mut g, model, true);
    let x = g.constant(sample.image.clone());
    let fmap = net.backbone(&mut g, x)?;
    let (logits, deltas) = net.rpn(&mut g, fmap)?;
    let plan = match source {
        PlanSource::Fixed(p) => p.clone(),
        PlanSource::Sampled(cfg, seed) => {
            make_plan(model, sample, g.value(logits), g.value(deltas), cfg, seed)?
        }
    };
    let (head_probs, head_deltas) = if plan.rois.is_empty() {
        (None, None)
    } else {
        let fs = g.value(fmap).shape().to_vec();
        let stride = model.config.stride();
        let regions: Vec<_> = plan
            .rois
            .iter()
            .map(|b| feature_region(b, stride, fs[2], fs[1]))
            .collect();
        let cfg = &model.config;
        let pooled = g.roi_pool(fmap, &regions, cfg.pool_h, cfg.pool_w)?;
        let (p, d) = net.head(&mut g, pooled)?;
        (Some(p), Some(d))
    };
    let out = NetOutputs {
        rpn_logits: logits,
        rpn_deltas: deltas,
        head_probs,
        head_deltas,
    };
    let loss = compute_loss(&mut g, &out, &plan, weights)?;
    Ok(Pass {
        params: net.vars().to_vec(),
        graph: g,
        loss,
        plan,
    })
}

fn gradients(pass: &mut Pass, model: &Model) -> Result<Vec<Tensor>> {
    pass.graph.backward(pass.loss.total)?;
    pass.params
        .iter()
        .zip(&model.params.tensors)
        .map(|(&v, t)| match pass.graph.grad(v) {
            Some(g) => Ok(g),
            None => Tensor::zeros(t.shape()),
        })
        .collect()
}

/// Draws the anchor and roi minibatches for one step.
pub fn plan_step(model: &Model, sample: &Sample, cfg: &TrainConfig, seed: u64) -> Result<StepPlan> {
    Ok(run_pass(model, sample, PlanSource::Sampled(cfg, seed), cfg.weights)?.plan)
}

/// Loss under a fixed plan.
pub fn loss_for_plan(
    model: &Model,
    sample: &Sample,
    plan: &StepPlan,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let pass = run_pass(model, sample, PlanSource::Fixed(plan), weights)?;
    Ok(pass.loss.breakdown(&pass.graph))
}

/// Loss and the gradient for every parameter tensor, in parameter order.
pub fn loss_and_gradients(
    model: &Model,
    sample: &Sample,
    plan: &StepPlan,
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut pass = run_pass(model, sample, PlanSource::Fixed(plan), weights)?;
    let b = pass.loss.breakdown(&pass.graph);
    let grads = gradients(&mut pass, model)?;
    Ok((b, grads))
}

/// One SGD update on one image.
pub fn train_step(
    model: &mut Model,
    sample: &Sample,
    sgd: &mut Sgd,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<LossBreakdown> {
    let seed = step_seed(cfg.seed, iteration);
    let mut pass = run_pass(model, sample, PlanSource::Sampled(cfg, seed), cfg.weights)?;
    let b = pass.loss.breakdown(&pass.graph);
    if !b.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at iteration {iteration}: {b:?}"
        )));
    }
    let grads = gradients(&mut pass, model)?;
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for {} at iteration {iteration}",
            model.params.names[i]
        )));
    }
    sgd.step_with_lr(
        &mut model.params.tensors,
        &grads,
        cfg.learning_rate(iteration),
    )?;
    Ok(b)
}

pub fn trailing_mean(history: &[LossBreakdown], window: usize) -> Option<f64> {
    if window == 0 || history.len() < window {
        return None;
    }
    let tail = &history[history.len() - window..];
    Some(tail.iter().map(|b| b.total).sum::<f64>() / window as f64)
}

/// Where a run that hits a non-finite loss leaves its state.
pub fn diagnostic_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".diag");
    PathBuf::from(s)
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    sgd: Sgd,
    iteration: usize,
    history: Vec<LossBreakdown>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            sgd: Sgd::new(config.sgd),
            config,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint's parameters, momentum and history.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model: ckpt.model,
            sgd: Sgd::with_velocity(config.sgd, ckpt.velocity),
            config,
            iteration: ckpt.iteration as usize,
            history: ckpt.history,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            velocity: self.sgd.velocity().to_vec(),
            iteration: self.iteration as u64,
            history: self.history.clone(),
        }
    }

    /// Trains on the sample chosen for the current iteration.
    pub fn step(&mut self, samples: &[Sample]) -> Result<LossBreakdown> {
        if samples.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        let n = samples.len();
        let order = epoch_order(n, self.config.seed, self.iteration / n);
        let sample = &samples[order[self.iteration % n]];
        let b = train_step(
            &mut self.model,
            sample,
            &mut self.sgd,
            &self.config,
            self.iteration,
        )?;
        self.iteration += 1;
        self.history.push(b);
        Ok(b)
    }

    fn should_stop(&self) -> bool {
        self.iteration >= self.config.max_iterations
            || matches!(
                (self.config.stop_loss, trailing_mean(&self.history, self.config.stop_window)),
                (Some(limit), Some(mean)) if mean < limit
            )
    }

    /// Steps until `max_iterations` or the stopping rule fires, saving to
    /// `checkpoint_path` every `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        samples: &[Sample],
        checkpoint_path: Option<&Path>,
        mut progress: impl FnMut(usize, &LossBreakdown),
    ) -> Result<()> {
        while !self.should_stop() {
            match self.step(samples) {
                Ok(b) => progress(self.iteration, &b),
                Err(e @ Error::Numeric(_)) => {
                    if let Some(p) = checkpoint_path {
                        save_checkpoint(&self.checkpoint(), diagnostic_path(p))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let (Some(every), Some(p)) = (self.config.checkpoint_every, checkpoint_path) {
                if self.iteration.is_multiple_of(every) {
                    save_checkpoint(&self.checkpoint(), p)?;
                }
            }
        }
        if let Some(p) = checkpoint_path {
            save_checkpoint(&self.checkpoint(), p)?;
        }
        Ok(())
    }
}

/// Prepared training samples: the train split when the manifest has one,
/// otherwise every record.
pub fn training_samples(manifest: &DatasetManifest, model: &Model) -> Result<Vec<Sample>> {
    let records = match manifest.splits {
        Some(_) => manifest.records_in(Split::Train),
        None => manifest.records.iter().collect(),
    };
    if records.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    let cfg = &model.config;
    records
        .into_iter()
        .map(|r| load_sample(manifest, r, cfg.input_w, cfg.input_h, cfg.stride()))
        .collect()
}

/// Trains `model` on the manifest's training split and returns the final state.
pub fn train_loop(
    manifest: &DatasetManifest,
    model: Model,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<Checkpoint> {
    let samples = training_samples(manifest, &model)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.run(&samples, checkpoint_path, |_, _| {})?;
    Ok(trainer.checkpoint())
}

pub const LOSS_CSV_HEADER: &str = "iteration,rpn_cls,rpn_reg,head_cls,head_reg,total";

/// Loss history as CSV, one row per step numbered from 1.
pub fn format_loss_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for (i, b) in history.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            b.rpn_cls,
            b.rpn_reg,
            b.head_cls,
            b.head_reg,
            b.total
        ));
    }
    s
}

pub fn write_loss_csv(history: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_loss_csv(history)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{prepare_input, render_scene, SyntheticSceneSpec};
    use crate::detector::DetectorConfig;

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            input_w: 64,
            input_h: 64,
            ..DetectorConfig::default()
        }
    }

    fn samples(n: usize, seed: u64) -> Vec<Sample> {
        let spec = SyntheticSceneSpec {
            width: 64,
            height: 64,
            size_range: (20, 30),
            ..SyntheticSceneSpec::default()
        };
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| {
                let scene = render_scene(&spec, &mut rng).unwrap();
                let raw = crate::dataset::decode_ppm(&scene.to_ppm()).unwrap();
                let (image, factors) = prepare_input(&raw, 64, 64, 16).unwrap();
                let kinds = &spec.classes;
                Sample {
                    image,
                    boxes: scene.objects.iter().map(|o| o.1).collect(),
                    labels: scene
                        .objects
                        .iter()
                        .map(|o| kinds.iter().position(|k| *k == o.0).unwrap())
                        .collect(),
                    factors,
                }
            })
            .collect()
    }

    fn model() -> Model {
        Model::new(small_config(), vec!["a".into(), "b".into(), "c".into()], 3).unwrap()
    }

    #[test]
    fn schedule_ramps_then_decays() {
        let mut cfg = TrainConfig {
            max_iterations: 100,
            warmup_iterations: 4,
            ..TrainConfig::default()
        };
        cfg.sgd.learning_rate = 0.4;
        let lr: Vec<f64> = [0, 1, 3, 4, 74, 75, 99]
            .iter()
            .map(|&i| cfg.learning_rate(i))
            .collect();
        assert_eq!(lr, [0.1, 0.2, 0.4, 0.4, 0.4, 0.4 * 0.1, 0.4 * 0.1]);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = samples(3, 1);
        let mut cfg = TrainConfig {
            max_iterations: 4,
            ..TrainConfig::default()
        };
        cfg.sgd.learning_rate = 0.0;
        let before = model();
        let mut t = Trainer::new(before.clone(), cfg).unwrap();
        t.run(&data, None, |_, _| {}).unwrap();
        assert_eq!(t.history().len(), 4);
        for (a, b) in before.params.tensors.iter().zip(&t.model.params.tensors) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn same_seed_same_history() {
        let data = samples(3, 2);
        let cfg = TrainConfig {
            max_iterations: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(model(), cfg.clone()).unwrap();
            t.run(&data, None, |_, _| {}).unwrap();
            t.history().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().all(|l| l.total >= 0.0 && l.is_finite()));
        for l in &a {
            assert_eq!(l.total, l.rpn_cls + l.rpn_reg + l.head_cls + l.head_reg);
        }
    }

    #[test]
    fn stop_rule_and_schedule() {
        let cfg = TrainConfig {
            max_iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate(74), 1e-3);
        assert!((cfg.learning_rate(75) - 1e-4).abs() < 1e-18);
        let h = vec![
            LossBreakdown {
                total: 1.0,
                ..Default::default()
            };
            3
        ];
        assert_eq!(trailing_mean(&h, 2), Some(1.0));
        assert_eq!(trailing_mean(&h, 4), None);

        let data = samples(2, 3);
        let cfg = TrainConfig {
            max_iterations: 50,
            stop_loss: Some(f64::INFINITY),
            stop_window: 3,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model(), cfg).unwrap();
        t.run(&data, None, |_, _| {}).unwrap();
        assert_eq!(t.iteration(), 3);
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let o = epoch_order(10, 4, 0);
        let mut s = o.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_ne!(o, epoch_order(10, 4, 1));
        assert_eq!(o, epoch_order(10, 4, 0));
    }

    #[test]
    fn plan_carries_ground_truth_rois() {
        let data = samples(1, 5);
        let m = model();
        let plan = plan_step(&m, &data[0], &TrainConfig::default(), 9).unwrap();
        assert!(!plan.rpn_deltas.is_empty());
        assert!(plan.roi_labels.iter().any(|&l| l > 0));
        for b in &data[0].boxes {
            assert!(plan.rois.contains(b));
        }
        let l1 = loss_for_plan(&m, &data[0], &plan, LossWeights::default()).unwrap();
        let (l2, grads) = loss_and_gradients(&m, &data[0], &plan, LossWeights::default()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(grads.len(), m.params.tensors.len());
    }

    #[test]
    fn loss_csv_layout() {
        let h = [LossBreakdown::from_parts([0.5, 0.25, 1.0, 0.0, 1.75])];
        assert_eq!(
            format_loss_csv(&h),
            format!("{LOSS_CSV_HEADER}\n1,0.5,0.25,1,0,1.75\n")
        );
    }
}
