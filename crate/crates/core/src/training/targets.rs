//! Foreground/background assignment for anchors and proposals.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::geometry::{encode, iou, AnchorGrid, BBox, BoxDelta};
use crate::tensor::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Foreground,
    Background,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Regression target, present exactly for foreground anchors.
    pub deltas: Vec<Option<BoxDelta>>,
    /// Index of the ground truth each foreground anchor regresses to.
    pub matched: Vec<Option<usize>>,
    /// Set when the image had no ground truth; every valid anchor is background.
    pub no_ground_truth: bool,
}

impl RpnTargets {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Anchors at or above `fg_iou` (or the best anchor of some ground truth)
/// are foreground, anchors below `bg_iou` background, the rest ignored.
/// Anchors crossing the image border are always ignored.
pub fn assign_rpn_targets(
    anchors: &AnchorGrid,
    gt_boxes: &[BBox],
    fg_iou: f64,
    bg_iou: f64,
) -> Result<RpnTargets> {
    if !(fg_iou > bg_iou) {
        return Err(Error::Config(format!(
            "foreground IoU {fg_iou} must exceed background IoU {bg_iou}"
        )));
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut deltas = vec![None; n];
    let mut matched = vec![None; n];
    if gt_boxes.is_empty() {
        for (l, a) in labels.iter_mut().zip(&anchors.anchors) {
            if a.inside {
                *l = AnchorLabel::Background;
            }
        }
        return Ok(RpnTargets {
            labels,
            deltas,
            matched,
            no_ground_truth: true,
        });
    }
    let mut best_for_gt = vec![0.0f64; gt_boxes.len()];
    let mut best_gt = vec![(0usize, 0.0f64); n];
    for (i, a) in anchors.anchors.iter().enumerate() {
        if !a.inside {
            continue;
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (j, g) in gt_boxes.iter().enumerate() {
            let v = iou(&a.bbox, g);
            if v > best.1 {
                best = (j, v);
            }
            if v > best_for_gt[j] {
                best_for_gt[j] = v;
            }
        }
        best_gt[i] = best;
        labels[i] = if best.1 >= fg_iou {
            AnchorLabel::Foreground
        } else if best.1 < bg_iou {
            AnchorLabel::Background
        } else {
            AnchorLabel::Ignore
        };
    }
    // every ground truth keeps its best anchors (all ties) as foreground
    for (i, a) in anchors.anchors.iter().enumerate() {
        if !a.inside {
            continue;
        }
        for (j, g) in gt_boxes.iter().enumerate() {
            if best_for_gt[j] > 0.0 && iou(&a.bbox, g) == best_for_gt[j] {
                labels[i] = AnchorLabel::Foreground;
            }
        }
    }
    for i in 0..n {
        if labels[i] == AnchorLabel::Foreground {
            let j = best_gt[i].0;
            matched[i] = Some(j);
            deltas[i] = Some(encode(&gt_boxes[j], &anchors.anchors[i].bbox));
        }
    }
    Ok(RpnTargets {
        labels,
        deltas,
        matched,
        no_ground_truth: false,
    })
}

/// Picks up to `floor(fg_fraction · batch)` foreground indices and fills the
/// rest of the batch with background. Returned indices are sorted.
pub fn sample_balanced(
    is_fg: &[bool],
    is_bg: &[bool],
    batch_size: usize,
    fg_fraction: f64,
    seed: u64,
) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    let mut fg: Vec<usize> = (0..is_fg.len()).filter(|&i| is_fg[i]).collect();
    let mut bg: Vec<usize> = (0..is_bg.len()).filter(|&i| is_bg[i]).collect();
    let fg_cap = (fg_fraction * batch_size as f64).floor() as usize;
    let n_fg = fg.len().min(fg_cap);
    fg.shuffle(&mut rng);
    fg.truncate(n_fg);
    let n_bg = bg.len().min(batch_size - n_fg);
    bg.shuffle(&mut rng);
    bg.truncate(n_bg);
    fg.extend(bg);
    fg.sort_unstable();
    fg
}

pub fn sample_rpn_minibatch(
    targets: &RpnTargets,
    batch_size: usize,
    fg_fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "RPN batch size {batch_size} is below 2"
        )));
    }
    let is_fg: Vec<bool> = targets
        .labels
        .iter()
        .map(|&l| l == AnchorLabel::Foreground)
        .collect();
    let is_bg: Vec<bool> = targets
        .labels
        .iter()
        .map(|&l| l == AnchorLabel::Background)
        .collect();
    Ok(sample_balanced(
        &is_fg,
        &is_bg,
        batch_size,
        fg_fraction,
        seed,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    /// Proposals followed by the ground-truth boxes.
    pub rois: Vec<BBox>,
    /// 0 is background, `c + 1` is foreground class `c`.
    pub labels: Vec<usize>,
    pub deltas: Vec<Option<BoxDelta>>,
    pub matched: Vec<Option<usize>>,
    /// Highest IoU of each roi with any ground truth (0 without ground truth).
    pub max_iou: Vec<f64>,
}

pub fn assign_head_targets(
    proposals: &[BBox],
    gt_boxes: &[BBox],
    gt_labels: &[usize],
    fg_iou: f64,
) -> Result<HeadTargets> {
    if gt_boxes.len() != gt_labels.len() {
        return Err(Error::Contract(format!(
            "{} boxes but {} labels",
            gt_boxes.len(),
            gt_labels.len()
        )));
    }
    let rois: Vec<BBox> = proposals.iter().chain(gt_boxes).copied().collect();
    let mut labels = Vec::with_capacity(rois.len());
    let mut deltas = Vec::with_capacity(rois.len());
    let mut matched = Vec::with_capacity(rois.len());
    let mut max_iou = Vec::with_capacity(rois.len());
    for r in &rois {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt_boxes.iter().enumerate() {
            let v = iou(r, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        max_iou.push(best.map_or(0.0, |b| b.1));
        match best {
            Some((j, v)) if v >= fg_iou => {
                labels.push(gt_labels[j] + 1);
                deltas.push(Some(encode(&gt_boxes[j], r)));
                matched.push(Some(j));
            }
            _ => {
                labels.push(0);
                deltas.push(None);
                matched.push(None);
            }
        }
    }
    Ok(HeadTargets {
        rois,
        labels,
        deltas,
        matched,
        max_iou,
    })
}

/// Background candidates are rois whose best IoU is below `bg_iou`; rois in
/// `[bg_iou, fg_iou)` are left out of the batch.
pub fn sample_head_minibatch(
    targets: &HeadTargets,
    batch_size: usize,
    fg_fraction: f64,
    bg_iou: f64,
    seed: u64,
) -> Vec<usize> {
    let is_fg: Vec<bool> = targets.labels.iter().map(|&l| l > 0).collect();
    let is_bg: Vec<bool> = targets
        .labels
        .iter()
        .zip(&targets.max_iou)
        .map(|(&l, &v)| l == 0 && v < bg_iou)
        .collect();
    sample_balanced(&is_fg, &is_bg, batch_size, fg_fraction, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Anchor, AnchorGrid};

    fn grid(boxes: &[BBox]) -> AnchorGrid {
        AnchorGrid {
            cols: boxes.len(),
            rows: 1,
            per_position: 1,
            anchors: boxes
                .iter()
                .enumerate()
                .map(|(i, b)| Anchor {
                    bbox: *b,
                    cell: (i, 0),
                    scale_idx: 0,
                    ratio_idx: 0,
                    inside: true,
                })
                .collect(),
        }
    }

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn threshold_rules() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        // IoU 1.0, 0.8, 0.5, 0.1 with the ground truth
        let anchors = [
            gt,
            bx(0.0, 0.0, 10.0, 8.0),
            bx(0.0, 0.0, 10.0, 5.0),
            bx(0.0, 0.0, 10.0, 1.0),
        ];
        assert!((iou(&anchors[1], &gt) - 0.8).abs() < 1e-12);
        assert!((iou(&anchors[2], &gt) - 0.5).abs() < 1e-12);
        assert!((iou(&anchors[3], &gt) - 0.1).abs() < 1e-12);
        let t = assign_rpn_targets(&grid(&anchors), &[gt], 0.7, 0.3).unwrap();
        assert_eq!(
            t.labels,
            vec![
                AnchorLabel::Foreground,
                AnchorLabel::Foreground,
                AnchorLabel::Ignore,
                AnchorLabel::Background
            ]
        );
        assert_eq!(t.deltas[0], Some(BoxDelta::default()));
        assert!(t.deltas[2].is_none() && t.deltas[3].is_none());
    }

    #[test]
    fn best_anchor_is_always_foreground() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let anchors = [bx(0.0, 0.0, 10.0, 5.0), bx(0.0, 0.0, 10.0, 2.0)];
        let t = assign_rpn_targets(&grid(&anchors), &[gt], 0.7, 0.3).unwrap();
        assert_eq!(t.labels[0], AnchorLabel::Foreground);
        assert_eq!(t.labels[1], AnchorLabel::Background);
        assert_eq!(t.matched[0], Some(0));
    }

    #[test]
    fn cross_boundary_anchors_are_ignored() {
        let gt = bx(0.0, 0.0, 10.0, 10.0);
        let mut g = grid(&[gt, bx(50.0, 50.0, 60.0, 60.0)]);
        g.anchors[0].inside = false;
        g.anchors[1].inside = false;
        let t = assign_rpn_targets(&g, &[gt], 0.7, 0.3).unwrap();
        assert!(t.labels.iter().all(|&l| l == AnchorLabel::Ignore));
    }

    #[test]
    fn no_ground_truth_is_all_background() {
        let g = grid(&[bx(0.0, 0.0, 5.0, 5.0), bx(5.0, 5.0, 9.0, 9.0)]);
        let t = assign_rpn_targets(&g, &[], 0.7, 0.3).unwrap();
        assert!(t.no_ground_truth);
        assert_eq!(t.count(AnchorLabel::Background), 2);
    }

    #[test]
    fn minibatch_backfills_background() {
        let mut is_fg = vec![false; 1000];
        let mut is_bg = vec![false; 1000];
        for i in 0..1000 {
            if i < 100 {
                is_fg[i] = true;
            } else {
                is_bg[i] = true;
            }
        }
        let picked = sample_balanced(&is_fg, &is_bg, 256, 0.5, 7);
        assert_eq!(picked.len(), 256);
        assert_eq!(picked.iter().filter(|&&i| i < 100).count(), 100);
        assert_eq!(picked, sample_balanced(&is_fg, &is_bg, 256, 0.5, 7));

        let none = vec![false; 1000];
        let all_bg = vec![true; 1000];
        let picked = sample_balanced(&none, &all_bg, 64, 0.5, 1);
        assert_eq!(picked.len(), 64);
    }

    #[test]
    fn head_assignment_examples() {
        let gt = [bx(10.0, 10.0, 30.0, 30.0)];
        let labels = [2];
        let far = bx(0.0, 0.0, 12.0, 12.0);
        assert!(iou(&far, &gt[0]) < 0.5);
        let t = assign_head_targets(&[gt[0], far], &gt, &labels, 0.5).unwrap();
        assert_eq!(t.rois.len(), 3);
        assert_eq!(t.labels, vec![3, 0, 3]);
        assert_eq!(t.deltas[0], Some(BoxDelta::default()));
        assert_eq!(t.deltas[1], None);
    }
}
