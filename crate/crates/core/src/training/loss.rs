//! Multi-task loss over a frozen step plan.

use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxDelta};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> [f64; 5] {
        [
            self.rpn_cls,
            self.rpn_reg,
            self.head_cls,
            self.head_reg,
            self.total,
        ]
    }

    pub fn from_parts(p: [f64; 5]) -> Self {
        LossBreakdown {
            rpn_cls: p[0],
            rpn_reg: p[1],
            head_cls: p[2],
            head_reg: p[3],
            total: p[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|v| v.is_finite())
    }
}

/// Weights on the two regression terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub rpn_reg: f64,
    pub head_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn_reg: 1.0,
            head_reg: 1.0,
        }
    }
}

/// Sampled training targets for one image. With the plan fixed the loss is a
/// deterministic function of the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepPlan {
    /// Sampled anchor indices into the anchor grid.
    pub rpn_anchors: Vec<usize>,
    /// 1 for a foreground anchor, 0 for background, parallel to `rpn_anchors`.
    pub rpn_labels: Vec<usize>,
    pub rpn_deltas: Vec<(usize, BoxDelta)>,
    pub rois: Vec<BBox>,
    /// 0 is background, `c + 1` foreground class `c`; parallel to `rois`.
    pub roi_labels: Vec<usize>,
    /// `(row into rois, target)` for foreground rois.
    pub roi_deltas: Vec<(usize, BoxDelta)>,
}

/// Network outputs the loss reads from.
#[derive(Clone, Copy, Debug)]
pub struct NetOutputs {
    /// `[2A,Hf,Wf]` objectness logits.
    pub rpn_logits: Var,
    /// `[4A,Hf,Wf]` anchor deltas.
    pub rpn_deltas: Var,
    /// `[R,K+1]` class probabilities for `plan.rois`, absent when there are no rois.
    pub head_probs: Option<Var>,
    /// `[R,4K]` class-specific deltas.
    pub head_deltas: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub head_cls: Var,
    pub head_reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            rpn_cls: g.value(self.rpn_cls).item(),
            rpn_reg: g.value(self.rpn_reg).item(),
            head_cls: g.value(self.head_cls).item(),
            head_reg: g.value(self.head_reg).item(),
            total: g.value(self.total).item(),
        }
    }
}

fn deltas_tensor(targets: &[(usize, BoxDelta)]) -> Result<Tensor> {
    let data = targets.iter().flat_map(|(_, d)| d.to_array()).collect();
    Tensor::new(&[targets.len(), 4], data)
}

/// `total = rpn_cls + λ₁·rpn_reg + head_cls + λ₂·head_reg`, with each
/// regression term averaged over its foreground count.
pub fn compute_loss(
    g: &mut Graph,
    out: &NetOutputs,
    plan: &StepPlan,
    weights: LossWeights,
) -> Result<LossVars> {
    if plan.rpn_anchors.is_empty() {
        return Err(Error::Contract(
            "no anchors were sampled for the RPN loss".into(),
        ));
    }
    if plan.rpn_anchors.len() != plan.rpn_labels.len() || plan.rois.len() != plan.roi_labels.len() {
        return Err(Error::Contract(
            "plan labels do not line up with their samples".into(),
        ));
    }
    let ls = g.value(out.rpn_logits).shape().to_vec();
    if ls.len() != 3 || !ls[0].is_multiple_of(2) {
        return Err(Error::shape(format!("RPN logits {ls:?} are not [2A,H,W]")));
    }
    let a = ls[0] / 2;
    let hw = ls[1] * ls[2];
    if g.value(out.rpn_deltas).shape() != [4 * a, ls[1], ls[2]] {
        return Err(Error::shape("RPN deltas do not match the logits"));
    }
    let n_anchors = a * hw;
    if let Some(&bad) = plan
        .rpn_anchors
        .iter()
        .chain(plan.rpn_deltas.iter().map(|(i, _)| i))
        .find(|&&i| i >= n_anchors)
    {
        return Err(Error::Index(format!(
            "anchor {bad} outside a grid of {n_anchors}"
        )));
    }

    let mut cls_index = Vec::with_capacity(2 * plan.rpn_anchors.len());
    for &i in &plan.rpn_anchors {
        let (pos, ai) = (i / a, i % a);
        cls_index.push(2 * ai * hw + pos);
        cls_index.push((2 * ai + 1) * hw + pos);
    }
    let picked = g.gather(out.rpn_logits, cls_index, &[plan.rpn_anchors.len(), 2])?;
    let probs = g.softmax(picked)?;
    let rpn_cls = g.cross_entropy(probs, &plan.rpn_labels)?;

    let rpn_reg = if plan.rpn_deltas.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let mut idx = Vec::with_capacity(4 * plan.rpn_deltas.len());
        for &(i, _) in &plan.rpn_deltas {
            let (pos, ai) = (i / a, i % a);
            idx.extend((0..4).map(|j| (4 * ai + j) * hw + pos));
        }
        let pred = g.gather(out.rpn_deltas, idx, &[plan.rpn_deltas.len(), 4])?;
        let target = g.constant(deltas_tensor(&plan.rpn_deltas)?);
        g.smooth_l1(pred, target)?
    };

    let (head_cls, head_reg) = match (out.head_probs, out.head_deltas) {
        (Some(probs), Some(deltas)) if !plan.rois.is_empty() => {
            let ps = g.value(probs).shape().to_vec();
            let ds = g.value(deltas).shape().to_vec();
            let k = ps[1] - 1;
            if ps[0] != plan.rois.len() || ds != [ps[0], 4 * k] {
                return Err(Error::shape(format!(
                    "head outputs {ps:?}/{ds:?} do not match {} rois",
                    plan.rois.len()
                )));
            }
            let cls = g.cross_entropy(probs, &plan.roi_labels)?;
            let reg = if plan.roi_deltas.is_empty() {
                g.constant(Tensor::scalar(0.0))
            } else {
                let mut idx = Vec::with_capacity(4 * plan.roi_deltas.len());
                for &(r, _) in &plan.roi_deltas {
                    let label = plan.roi_labels[r];
                    if label == 0 {
                        return Err(Error::Contract(format!(
                            "roi {r} has a regression target but a background label"
                        )));
                    }
                    let base = r * 4 * k + 4 * (label - 1);
                    idx.extend(base..base + 4);
                }
                let pred = g.gather(deltas, idx, &[plan.roi_deltas.len(), 4])?;
                let target = g.constant(deltas_tensor(&plan.roi_deltas)?);
                g.smooth_l1(pred, target)?
            };
            (cls, reg)
        }
        _ if plan.rois.is_empty() => {
            let z = g.constant(Tensor::scalar(0.0));
            (z, z)
        }
        _ => {
            return Err(Error::Contract(
                "plan has rois but the head was not run".into(),
            ))
        }
    };

    let w_rpn = g.scale(rpn_reg, weights.rpn_reg)?;
    let w_head = g.scale(head_reg, weights.head_reg)?;
    let t = g.add(rpn_cls, w_rpn)?;
    let t = g.add(t, head_cls)?;
    let total = g.add(t, w_head)?;
    Ok(LossVars {
        rpn_cls,
        rpn_reg,
        head_cls,
        head_reg,
        total,
    })
}
