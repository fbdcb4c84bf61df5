use super::BBox;
use crate::error::{Error, Result};

/// Anchor scheme: `|scales| × |ratios|` boxes centered on every stride cell.
/// An anchor of scale `s` has side `base_size · s` before the aspect ratio
/// (height / width) is applied at constant area.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub stride: usize,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub base_size: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            stride: 16,
            scales: vec![0.25, 0.5, 1.0, 2.0],
            ratios: vec![0.5, 1.0, 2.0],
            base_size: 64.0,
        }
    }
}

impl AnchorConfig {
    pub fn per_position(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("anchor stride must be positive".into()));
        }
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config(
                "anchor scales and ratios must be non-empty".into(),
            ));
        }
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.scales.iter().all(positive)
            || !self.ratios.iter().all(positive)
            || !positive(&self.base_size)
        {
            return Err(Error::Config(format!(
                "anchor sizes must be positive: base {}, scales {:?}, ratios {:?}",
                self.base_size, self.scales, self.ratios
            )));
        }
        Ok(())
    }

    /// `(width, height)` of the anchor for a scale/ratio pair.
    pub fn anchor_size(&self, scale_idx: usize, ratio_idx: usize) -> (f64, f64) {
        let side = self.base_size * self.scales[scale_idx];
        let r = self.ratios[ratio_idx].sqrt();
        (side / r, side * r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    /// Grid cell, `(column, row)`.
    pub cell: (usize, usize),
    pub scale_idx: usize,
    pub ratio_idx: usize,
    /// False when the anchor extends past the image border.
    pub inside: bool,
}

/// Anchors ordered by row, then column, then scale, then ratio, so anchor
/// `a` of cell `(x, y)` sits at index `(y · cols + x) · per_position + a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub cols: usize,
    pub rows: usize,
    pub per_position: usize,
    pub anchors: Vec<Anchor>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BBox> {
        self.anchors.iter().map(|a| &a.bbox)
    }
}

pub fn generate_anchors(image_w: usize, image_h: usize, cfg: &AnchorConfig) -> Result<AnchorGrid> {
    cfg.validate()?;
    if image_w < cfg.stride || image_h < cfg.stride {
        return Err(Error::Config(format!(
            "image {image_w}x{image_h} is smaller than one stride ({})",
            cfg.stride
        )));
    }
    let cols = image_w / cfg.stride;
    let rows = image_h / cfg.stride;
    let stride = cfg.stride as f64;
    let (w, h) = (image_w as f64, image_h as f64);
    let mut anchors = Vec::with_capacity(cols * rows * cfg.per_position());
    for y in 0..rows {
        let cy = (y as f64 + 0.5) * stride;
        for x in 0..cols {
            let cx = (x as f64 + 0.5) * stride;
            for si in 0..cfg.scales.len() {
                for ri in 0..cfg.ratios.len() {
                    let (aw, ah) = cfg.anchor_size(si, ri);
                    let bbox = BBox::from_center(cx, cy, aw, ah)?;
                    anchors.push(Anchor {
                        bbox,
                        cell: (x, y),
                        scale_idx: si,
                        ratio_idx: ri,
                        inside: bbox.inside(w, h),
                    });
                }
            }
        }
    }
    Ok(AnchorGrid {
        cols,
        rows,
        per_position: cfg.per_position(),
        anchors,
    })
}
