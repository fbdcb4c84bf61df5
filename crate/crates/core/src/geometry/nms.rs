use super::{iou, ScoredBox};

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (ties keep input order); a box survives if its IoU with every kept box is
/// at most `iou_threshold`.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64, max_keep: Option<usize>) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let limit = max_keep.unwrap_or(usize::MAX);
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        if kept.len() >= limit {
            break;
        }
        let cand = &boxes[i];
        if kept
            .iter()
            .all(|k| iou(&k.bbox, &cand.bbox) <= iou_threshold)
        {
            kept.push(*cand);
        }
    }
    kept
}
