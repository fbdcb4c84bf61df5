//! Browser bindings for the geometry half of tinyrcnn. Boxes travel as flat
//! `f64` arrays, `[xmin, ymin, xmax, ymax]` per box.

use tinyrcnn::detector::{feature_region, roi_pool, Proposal};
use tinyrcnn::geometry::{generate_anchors, iou, nms, AnchorConfig, BBox, ScoredBox};
use tinyrcnn::tensor::Tensor;
use wasm_bindgen::prelude::*;

fn bbox(v: &[f64]) -> Result<BBox, String> {
    match v {
        [a, b, c, d] => BBox::new(*a, *b, *c, *d).map_err(|e| e.to_string()),
        _ => Err(format!("a box needs 4 coordinates, got {}", v.len())),
    }
}

/// Anchors for an image, five values each: the box and an inside flag
/// (1 inside, 0 crossing the border).
#[wasm_bindgen]
pub fn anchor_grid(
    width: usize,
    height: usize,
    stride: usize,
    base_size: f64,
    scales: Vec<f64>,
    ratios: Vec<f64>,
) -> Result<Vec<f64>, String> {
    let cfg = AnchorConfig {
        stride,
        scales,
        ratios,
        base_size,
    };
    let grid = generate_anchors(width, height, &cfg).map_err(|e| e.to_string())?;
    Ok(grid
        .anchors
        .iter()
        .flat_map(|a| {
            let b = a.bbox;
            [
                b.xmin,
                b.ymin,
                b.xmax,
                b.ymax,
                if a.inside { 1.0 } else { 0.0 },
            ]
        })
        .collect())
}

/// Indices of the boxes kept by greedy NMS, highest score first. Input is
/// five values per box, the last one the score.
#[wasm_bindgen]
pub fn nms_keep(boxes: Vec<f64>, iou_threshold: f64) -> Result<Vec<u32>, String> {
    if !boxes.len().is_multiple_of(5) {
        return Err(format!("expected 5 values per box, got {}", boxes.len()));
    }
    let scored = boxes
        .chunks(5)
        .map(|c| ScoredBox::new(bbox(&c[..4])?, c[4]).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let kept = nms(&scored, iou_threshold, None);
    let mut used = vec![false; scored.len()];
    let mut out = Vec::with_capacity(kept.len());
    for k in &kept {
        let i = (0..scored.len())
            .find(|&i| !used[i] && scored[i] == *k)
            .ok_or("kept box not found in the input")?;
        used[i] = true;
        out.push(i as u32);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn box_iou(a: Vec<f64>, b: Vec<f64>) -> Result<f64, String> {
    Ok(iou(&bbox(&a)?, &bbox(&b)?))
}

/// Feature cells covered by a box, `[x0, y0, x1, y1]` with exclusive ends.
#[wasm_bindgen]
pub fn roi_cells(
    b: Vec<f64>,
    stride: usize,
    fmap_w: usize,
    fmap_h: usize,
) -> Result<Vec<u32>, String> {
    let r = feature_region(&bbox(&b)?, stride, fmap_w, fmap_h);
    Ok(vec![r.x0 as u32, r.y0 as u32, r.x1 as u32, r.y1 as u32])
}

/// Max-pools the region under `b` of a single-channel `fmap_h × fmap_w`
/// feature map to `out_h × out_w`.
#[wasm_bindgen]
pub fn roi_pool_single(
    feature: Vec<f64>,
    fmap_w: usize,
    fmap_h: usize,
    b: Vec<f64>,
    stride: usize,
    out_w: usize,
    out_h: usize,
) -> Result<Vec<f64>, String> {
    let fmap = Tensor::new(&[1, fmap_h, fmap_w], feature).map_err(|e| e.to_string())?;
    let p = Proposal {
        bbox: bbox(&b)?,
        objectness: 1.0,
    };
    let pooled = roi_pool(&fmap, &p, out_h, out_w, stride).map_err(|e| e.to_string())?;
    Ok(pooled.data().to_vec())
}
