//! Axis-aligned boxes: overlap, anchor grids, delta coding, clipping and
//! non-maximum suppression.

mod anchors;
mod nms;

pub use anchors::{generate_anchors, Anchor, AnchorConfig, AnchorGrid};
pub use nms::nms;

use crate::error::{Error, Result};

/// Pixel rectangle `[xmin, xmax) × [ymin, ymax)` with positive area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "box {b:?} has non-finite coordinates"
            )));
        }
        if xmax <= xmin || ymax <= ymin {
            return Err(Error::DegenerateBox(format!("{b:?} has no area")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn inside(&self, image_w: f64, image_h: f64) -> bool {
        self.xmin >= 0.0 && self.ymin >= 0.0 && self.xmax <= image_w && self.ymax <= image_h
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Self> {
        Self::new(
            self.xmin * sx,
            self.ymin * sy,
            self.xmax * sx,
            self.ymax * sy,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Contract(format!("score {score} not in [0, 1]")));
        }
        Ok(ScoredBox { bbox, score })
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.xmax.min(b.xmax) - a.xmin.max(b.xmin);
    let ih = a.ymax.min(b.ymax) - a.ymin.max(b.ymin);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Center offsets normalized by the reference size, plus log size ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> BoxDelta {
    let (xa, ya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let (xc, yc) = gt.center();
    BoxDelta {
        tx: (xc - xa) / wa,
        ty: (yc - ya) / ha,
        tw: (gt.width() / wa).ln(),
        th: (gt.height() / ha).ln(),
    }
}

pub fn decode(delta: &BoxDelta, anchor: &BBox) -> Result<BBox> {
    let d = delta.to_array();
    if !d.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite delta {delta:?}")));
    }
    let (xa, ya) = anchor.center();
    let (wa, ha) = (anchor.width(), anchor.height());
    let cx = delta.tx * wa + xa;
    let cy = delta.ty * ha + ya;
    let w = wa * delta.tw.exp();
    let h = ha * delta.th.exp();
    if !(w.is_finite() && h.is_finite()) {
        return Err(Error::Numeric(format!(
            "delta {delta:?} decodes to an unbounded box"
        )));
    }
    BBox::from_center(cx, cy, w, h)
}

/// Clamps a box to `[0, image_w] × [0, image_h]`.
pub fn clip(b: &BBox, image_w: f64, image_h: f64) -> Result<BBox> {
    let c = BBox {
        xmin: b.xmin.clamp(0.0, image_w),
        ymin: b.ymin.clamp(0.0, image_h),
        xmax: b.xmax.clamp(0.0, image_w),
        ymax: b.ymax.clamp(0.0, image_h),
    };
    if c.xmax <= c.xmin || c.ymax <= c.ymin {
        return Err(Error::DegenerateBox(format!(
            "{b:?} lies outside the {image_w}x{image_h} image"
        )));
    }
    Ok(c)
}
