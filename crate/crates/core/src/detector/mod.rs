//! The two-stage network: convolutional backbone, region proposal network,
//! RoI pooling and a softmax classification head with class-specific box
//! refinement.

mod config;
mod params;

pub use config::{BackboneConfig, DetectorConfig, LayerSpec, ProposalConfig};
pub use params::{parameter_shapes, ModelParameters};

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::geometry::{clip, decode, generate_anchors, nms, AnchorGrid, BBox, BoxDelta, ScoredBox};
use crate::tensor::{FeatureRegion, Graph, Tensor, Var};

/// Upper bound on decoded log-size deltas, `ln(1000 / 16)`.
const DELTA_CLAMP: f64 = 4.135_166_556_742_356;

/// Largest float strictly below one; reported confidences never reach 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Foreground class index in `[0, K)`.
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: DetectorConfig,
    pub classes: Vec<String>,
    pub params: ModelParameters,
}

impl Model {
    pub fn new(config: DetectorConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::Config("a detector needs at least one class".into()));
        }
        let params = ModelParameters::init(&config, classes.len(), seed)?;
        Ok(Model {
            config,
            classes,
            params,
        })
    }

    pub fn from_parts(
        config: DetectorConfig,
        classes: Vec<String>,
        params: ModelParameters,
    ) -> Result<Self> {
        config.validate()?;
        params.check_against(&config, classes.len())?;
        Ok(Model {
            config,
            classes,
            params,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Model parameters registered on a graph.
pub(crate) struct Net<'a> {
    cfg: &'a DetectorConfig,
    vars: Vec<Var>,
    backbone_params: usize,
}

impl<'a> Net<'a> {
    pub fn register(g: &mut Graph, model: &'a Model, trainable: bool) -> Self {
        let vars = model
            .params
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        let backbone_params = 2 * model
            .config
            .backbone
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        Net {
            cfg: &model.config,
            vars,
            backbone_params,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn backbone(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let s = g.value(image).shape().to_vec();
        let stride = self.cfg.backbone.downsample;
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("backbone expects [3,H,W], got {s:?}")));
        }
        if !s[1].is_multiple_of(stride) || !s[2].is_multiple_of(stride) {
            return Err(Error::shape(format!(
                "input {}x{} is not divisible by stride {stride}",
                s[2], s[1]
            )));
        }
        let mut x = image;
        let mut p = 0;
        for layer in &self.cfg.backbone.layers {
            x = match *layer {
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let y = g.conv2d(x, self.vars[p], self.vars[p + 1], stride, padding)?;
                    p += 2;
                    y
                }
                LayerSpec::MaxPool { window, stride } => g.maxpool2d(x, window, stride)?,
                LayerSpec::Relu => g.relu(x)?,
            };
        }
        let out = g.value(x).shape();
        if out[1] != s[1] / stride || out[2] != s[2] / stride {
            return Err(Error::shape(format!(
                "backbone produced {}x{} for a {}x{} input at stride {stride}",
                out[2], out[1], s[2], s[1]
            )));
        }
        Ok(x)
    }

    /// Returns `(class logits [2A,Hf,Wf], deltas [4A,Hf,Wf])`. Channel `2a` is
    /// the background logit of anchor `a`, `2a + 1` the foreground logit.
    pub fn rpn(&self, g: &mut Graph, fmap: Var) -> Result<(Var, Var)> {
        let v = &self.vars[self.backbone_params..];
        let c = g.value(fmap).shape()[0];
        let expected = g.value(v[0]).shape()[1];
        if c != expected {
            return Err(Error::shape(format!(
                "feature map has {c} channels, RPN expects {expected}"
            )));
        }
        let t = g.conv2d(fmap, v[0], v[1], 1, 1)?;
        let t = g.relu(t)?;
        let cls = g.conv2d(t, v[2], v[3], 1, 0)?;
        let reg = g.conv2d(t, v[4], v[5], 1, 0)?;
        Ok((cls, reg))
    }

    /// Head over pooled features `[R,C,ph,pw]`: returns
    /// `(class probabilities [R,K+1], deltas [R,4K])`.
    pub fn head(&self, g: &mut Graph, pooled: Var) -> Result<(Var, Var)> {
        let v = &self.vars[self.backbone_params + 6..];
        let s = g.value(pooled).shape().to_vec();
        let flat: usize = s[1..].iter().product();
        let expected = g.value(v[0]).shape()[0];
        if flat != expected {
            return Err(Error::shape(format!(
                "pooled features {s:?} flatten to {flat}, head expects {expected}"
            )));
        }
        let x = g.reshape(pooled, &[s[0], flat])?;
        let h = g.matmul(x, v[0])?;
        let h = g.add_bias(h, v[1])?;
        let h = g.relu(h)?;
        let logits = g.matmul(h, v[2])?;
        let logits = g.add_bias(logits, v[3])?;
        let probs = g.softmax(logits)?;
        let deltas = g.matmul(h, v[4])?;
        let deltas = g.add_bias(deltas, v[5])?;
        Ok((probs, deltas))
    }
}

/// Feature map `[C, H/s, W/s]` for a prepared `[3,H,W]` image.
pub fn backbone_forward(image: &Tensor, model: &Model) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = Net::register(&mut g, model, false);
    let x = g.constant(image.clone());
    let f = net.backbone(&mut g, x)?;
    Ok(g.value(f).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput {
    /// Foreground probability per anchor, `[A,Hf,Wf]`.
    pub objectness: Tensor,
    /// Delta quadruple per anchor, `[4A,Hf,Wf]`.
    pub deltas: Tensor,
}

/// Two-way softmax over `(background, foreground)` logit pairs.
pub(crate) fn objectness_from_logits(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    let a = s[0] / 2;
    let hw = s[1] * s[2];
    let d = logits.data();
    let mut out = Vec::with_capacity(a * hw);
    for ai in 0..a {
        for pos in 0..hw {
            let bg = d[2 * ai * hw + pos];
            let fg = d[(2 * ai + 1) * hw + pos];
            let m = bg.max(fg);
            let (eb, ef) = ((bg - m).exp(), (fg - m).exp());
            out.push(ef / (eb + ef));
        }
    }
    Tensor::new(&[a, s[1], s[2]], out)
}

pub fn rpn_forward(fmap: &Tensor, model: &Model) -> Result<RpnOutput> {
    let mut g = Graph::new();
    let net = Net::register(&mut g, model, false);
    let f = g.constant(fmap.clone());
    let (cls, reg) = net.rpn(&mut g, f)?;
    Ok(RpnOutput {
        objectness: objectness_from_logits(g.value(cls))?,
        deltas: g.value(reg).clone(),
    })
}

/// Decodes every anchor, clips to the image, drops small boxes, keeps the
/// `pre_nms_n` best by objectness, suppresses overlaps and keeps
/// `post_nms_n`.
pub fn generate_proposals(
    objectness: &Tensor,
    deltas: &Tensor,
    anchors: &AnchorGrid,
    image_w: usize,
    image_h: usize,
    cfg: &ProposalConfig,
) -> Result<Vec<Proposal>> {
    let a = anchors.per_position;
    let os = objectness.shape();
    if os.len() != 3 || os[0] != a || os[1] != anchors.rows || os[2] != anchors.cols {
        return Err(Error::shape(format!(
            "objectness {os:?} does not match a {}x{}x{a} anchor grid",
            anchors.cols, anchors.rows
        )));
    }
    if deltas.shape() != [4 * a, anchors.rows, anchors.cols] {
        return Err(Error::shape(format!(
            "deltas {:?} do not match the anchor grid",
            deltas.shape()
        )));
    }
    let hw = anchors.rows * anchors.cols;
    let (w, h) = (image_w as f64, image_h as f64);
    let obj = objectness.data();
    let del = deltas.data();
    let mut candidates = Vec::new();
    for (i, anchor) in anchors.anchors.iter().enumerate() {
        let (pos, ai) = (i / a, i % a);
        let d = BoxDelta {
            tx: del[4 * ai * hw + pos],
            ty: del[(4 * ai + 1) * hw + pos],
            tw: del[(4 * ai + 2) * hw + pos].min(DELTA_CLAMP),
            th: del[(4 * ai + 3) * hw + pos].min(DELTA_CLAMP),
        };
        let Ok(decoded) = decode(&d, &anchor.bbox) else {
            continue;
        };
        let Ok(clipped) = clip(&decoded, w, h) else {
            continue;
        };
        if clipped.width() < cfg.min_size || clipped.height() < cfg.min_size {
            continue;
        }
        candidates.push(ScoredBox {
            bbox: clipped,
            score: obj[ai * hw + pos],
        });
    }
    candidates.sort_by(|x, y| y.score.total_cmp(&x.score));
    candidates.truncate(cfg.pre_nms_n);
    Ok(nms(&candidates, cfg.nms_threshold, Some(cfg.post_nms_n))
        .into_iter()
        .map(|s| Proposal {
            bbox: s.bbox,
            objectness: s.score,
        })
        .collect())
}

/// Maps an image-space box onto feature cells: floor for the start, ceil for
/// the end, clamped to the map.
pub fn feature_region(b: &BBox, stride: usize, fmap_w: usize, fmap_h: usize) -> FeatureRegion {
    let s = stride as f64;
    let span = |lo: f64, hi: f64, n: usize| {
        let start = ((lo / s).floor().max(0.0) as usize).min(n - 1);
        let end = ((hi / s).ceil() as usize).clamp(start + 1, n);
        (start, end)
    };
    let (x0, x1) = span(b.xmin, b.xmax, fmap_w);
    let (y0, y1) = span(b.ymin, b.ymax, fmap_h);
    FeatureRegion { x0, y0, x1, y1 }
}

/// Fixed-size max pooling of one proposal's feature region, `[C,out_h,out_w]`.
pub fn roi_pool(
    fmap: &Tensor,
    proposal: &Proposal,
    out_h: usize,
    out_w: usize,
    stride: usize,
) -> Result<Tensor> {
    let s = fmap.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("roi_pool expects [C,H,W], got {s:?}")));
    }
    let b = &proposal.bbox;
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::Contract(format!("degenerate proposal {b:?}")));
    }
    let region = feature_region(b, stride, s[2], s[1]);
    let mut g = Graph::new();
    let f = g.constant(fmap.clone());
    let p = g.roi_pool(f, &[region], out_h, out_w)?;
    g.value(p).reshape(&[s[0], out_h, out_w])
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[K+1]`, index 0 is background.
    pub class_probs: Tensor,
    /// `[K,4]`, one delta per foreground class.
    pub deltas: Tensor,
}

pub fn head_forward(pooled: &Tensor, model: &Model) -> Result<HeadOutput> {
    let mut shape = vec![1];
    shape.extend_from_slice(pooled.shape());
    let mut g = Graph::new();
    let net = Net::register(&mut g, model, false);
    let p = g.constant(pooled.reshape(&shape)?);
    let (probs, deltas) = net.head(&mut g, p)?;
    let k = model.n_classes();
    Ok(HeadOutput {
        class_probs: g.value(probs).reshape(&[k + 1])?,
        deltas: g.value(deltas).reshape(&[k, 4])?,
    })
}

/// Wall-clock time spent in each detector stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub backbone: Duration,
    pub proposals: Duration,
    pub head: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.backbone + self.proposals + self.head
    }
}

pub fn detect(image: &Tensor, model: &Model) -> Result<Vec<Detection>> {
    detect_timed(image, model).map(|(d, _)| d)
}

pub fn detect_timed(image: &Tensor, model: &Model) -> Result<(Vec<Detection>, StageTimings)> {
    let cfg = &model.config;
    let mut timings = StageTimings::default();
    let t0 = Instant::now();

    let mut g = Graph::new();
    let net = Net::register(&mut g, model, false);
    let x = g.constant(image.clone());
    let fmap = net.backbone(&mut g, x)?;
    let t1 = Instant::now();
    timings.backbone = t1 - t0;

    let (image_h, image_w) = (image.shape()[1], image.shape()[2]);
    let (cls, reg) = net.rpn(&mut g, fmap)?;
    let objectness = objectness_from_logits(g.value(cls))?;
    let anchors = generate_anchors(image_w, image_h, &cfg.anchors)?;
    let proposals = generate_proposals(
        &objectness,
        g.value(reg),
        &anchors,
        image_w,
        image_h,
        &cfg.proposals,
    )?;
    let t2 = Instant::now();
    timings.proposals = t2 - t1;

    if proposals.is_empty() {
        timings.head = t2.elapsed();
        return Ok((Vec::new(), timings));
    }
    let fs = g.value(fmap).shape().to_vec();
    let regions: Vec<_> = proposals
        .iter()
        .map(|p| feature_region(&p.bbox, cfg.stride(), fs[2], fs[1]))
        .collect();
    let pooled = g.roi_pool(fmap, &regions, cfg.pool_h, cfg.pool_w)?;
    let (probs, deltas) = net.head(&mut g, pooled)?;
    let detections = collect_detections(
        &proposals,
        g.value(probs),
        g.value(deltas),
        model.n_classes(),
        image_w,
        image_h,
        cfg,
    );
    timings.head = t2.elapsed();
    Ok((detections, timings))
}

fn collect_detections(
    proposals: &[Proposal],
    probs: &Tensor,
    deltas: &Tensor,
    k: usize,
    image_w: usize,
    image_h: usize,
    cfg: &DetectorConfig,
) -> Vec<Detection> {
    let mut per_class: Vec<Vec<ScoredBox>> = vec![Vec::new(); k];
    for (r, proposal) in proposals.iter().enumerate() {
        let row = &probs.data()[r * (k + 1)..(r + 1) * (k + 1)];
        let mut best = 0;
        for c in 1..=k {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == 0 {
            continue;
        }
        let confidence = row[best].min(BELOW_ONE);
        if confidence < cfg.confidence_threshold {
            continue;
        }
        let off = r * 4 * k + 4 * (best - 1);
        let mut d = BoxDelta::from_slice(&deltas.data()[off..off + 4]);
        d.tw = d.tw.min(DELTA_CLAMP);
        d.th = d.th.min(DELTA_CLAMP);
        let Ok(decoded) = decode(&d, &proposal.bbox) else {
            continue;
        };
        let Ok(bbox) = clip(&decoded, image_w as f64, image_h as f64) else {
            continue;
        };
        per_class[best - 1].push(ScoredBox {
            bbox,
            score: confidence,
        });
    }
    let mut out: Vec<Detection> = per_class
        .iter()
        .enumerate()
        .flat_map(|(class_id, boxes)| {
            nms(boxes, cfg.class_nms_threshold, None)
                .into_iter()
                .map(move |s| Detection {
                    bbox: s.bbox,
                    class_id,
                    confidence: s.score,
                })
        })
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}
