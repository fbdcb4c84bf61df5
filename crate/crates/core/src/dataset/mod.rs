//! Images, annotations, train/test splits and the synthetic scene generator.

mod manifest;
mod ppm;
mod prepare;
mod synthetic;

pub use manifest::{
    format_annotations, format_manifest, load_manifest, parse_annotation_text, parse_annotations,
    parse_manifest_text, save_manifest, split, validate_bounds, Annotation, DatasetManifest,
    GroundTruth, Split, MANIFEST_HEADER,
};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, ppm_dimensions, save_ppm};
pub use prepare::{normalize, prepare_input, rescale_box, resize_nearest};
pub use synthetic::{
    generate_synthetic, image_name, render_scene, BackgroundMode, Scene, ShapeKind,
    SyntheticSceneSpec,
};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// A prepared image with its ground truth expressed in model-input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    /// Class ids into the manifest vocabulary.
    pub labels: Vec<usize>,
    /// `(x, y)` factors from original to model-input pixels.
    pub factors: (f64, f64),
}

pub fn load_sample(
    manifest: &DatasetManifest,
    record: &Annotation,
    target_w: usize,
    target_h: usize,
    stride: usize,
) -> Result<Sample> {
    let raw = load_ppm(manifest.image_path(record))?;
    let (image, factors) = prepare_input(&raw, target_w, target_h, stride)?;
    let mut boxes = Vec::with_capacity(record.objects.len());
    let mut labels = Vec::with_capacity(record.objects.len());
    for o in &record.objects {
        let id = manifest
            .class_id(&o.class)
            .ok_or_else(|| Error::Validation {
                image: record.image.display().to_string(),
                msg: format!("class {:?} is not in the vocabulary", o.class),
            })?;
        boxes.push(rescale_box(&o.bbox, factors)?);
        labels.push(id);
    }
    Ok(Sample {
        image,
        boxes,
        labels,
        factors,
    })
}
