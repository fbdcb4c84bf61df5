use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Nearest-neighbor resize of a `[C,H,W]` image.
pub fn resize_nearest(image: &Tensor, target_w: usize, target_h: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (target_h, target_w) {
        return Ok(image.clone());
    }
    let xs: Vec<usize> = (0..target_w)
        .map(|x| (((x as f64 + 0.5) * w as f64 / target_w as f64) as usize).min(w - 1))
        .collect();
    let ys: Vec<usize> = (0..target_h)
        .map(|y| (((y as f64 + 0.5) * h as f64 / target_h as f64) as usize).min(h - 1))
        .collect();
    let src = image.data();
    let mut data = Vec::with_capacity(c * target_h * target_w);
    for ch in 0..c {
        for &sy in &ys {
            let row = &src[(ch * h + sy) * w..][..w];
            data.extend(xs.iter().map(|&sx| row[sx]));
        }
    }
    Tensor::new(&[c, target_h, target_w], data)
}

/// Maps `[0, 1]` pixel values into `[−1, 1]`.
pub fn normalize(image: &Tensor) -> Tensor {
    let data = image.data().iter().map(|v| (v - 0.5) * 2.0).collect();
    Tensor::new(image.shape(), data).expect("same shape")
}

/// Resizes to the model input and normalizes. Returns the prepared tensor and
/// the `(x, y)` scale factors applied to the image.
pub fn prepare_input(
    image: &Tensor,
    target_w: usize,
    target_h: usize,
    stride: usize,
) -> Result<(Tensor, (f64, f64))> {
    if stride == 0
        || target_w == 0
        || target_h == 0
        || !target_w.is_multiple_of(stride)
        || !target_h.is_multiple_of(stride)
    {
        return Err(Error::Config(format!(
            "target {target_w}x{target_h} is not divisible by stride {stride}"
        )));
    }
    let s = image.shape();
    let factors = (target_w as f64 / s[2] as f64, target_h as f64 / s[1] as f64);
    let resized = resize_nearest(image, target_w, target_h)?;
    Ok((normalize(&resized), factors))
}

pub fn rescale_box(b: &BBox, factors: (f64, f64)) -> Result<BBox> {
    b.scaled(factors.0, factors.1)
}
