//! Seeded scenes of flat-colored shapes standing in for hand-sign photos.
//!
//! Each object is rasterized by testing pixel centers against its shape, and
//! its ground-truth box is the exact extent of the painted pixels (clipped to
//! the image when the object is truncated). Occluders are drawn last and do
//! not change the boxes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::manifest::{format_annotations, Annotation, DatasetManifest, GroundTruth};
use super::ppm::encode_rgb8;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{seeded_rng, Rng64};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Triangle,
    Bar,
    Cross,
    Diamond,
    Ring,
    Frame,
    Hourglass,
    Ex,
    Semicircle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Bar,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Frame,
        ShapeKind::Hourglass,
        ShapeKind::Ex,
        ShapeKind::Semicircle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Bar => "bar",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ring => "ring",
            ShapeKind::Frame => "frame",
            ShapeKind::Hourglass => "hourglass",
            ShapeKind::Ex => "ex",
            ShapeKind::Semicircle => "semicircle",
        }
    }

    /// Membership test in unit coordinates: `(u, v)` spans the object's
    /// layout rectangle as `[0, 1)²`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            ShapeKind::Circle => r2 <= 0.25,
            ShapeKind::Triangle => du.abs() <= 0.5 * v,
            ShapeKind::Bar => true,
            ShapeKind::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
            ShapeKind::Diamond => du.abs() + dv.abs() <= 0.5,
            ShapeKind::Ring => (0.09..=0.25).contains(&r2),
            ShapeKind::Frame => du.abs().max(dv.abs()) >= 0.3,
            ShapeKind::Hourglass => du.abs() <= dv.abs(),
            ShapeKind::Ex => (u - v).abs() <= 0.16 || (u + v - 1.0).abs() <= 0.16,
            ShapeKind::Semicircle => du * du + (v - 1.0) * (v - 1.0) <= 0.25 && v >= 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundMode {
    Flat,
    Gradient,
    Noise,
    /// Pick one of the other modes per image.
    Mixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: BackgroundMode,
    pub classes: Vec<ShapeKind>,
    pub shapes_per_image: (usize, usize),
    /// Side length range in pixels of an object's layout rectangle.
    pub size_range: (usize, usize),
    pub truncation_prob: f64,
    pub occlusion_prob: f64,
    /// Whole-image brightness factor is drawn from `[1 − j, 1 + j]`.
    pub brightness_jitter: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            width: 128,
            height: 128,
            background: BackgroundMode::Mixed,
            classes: ShapeKind::ALL[..3].to_vec(),
            shapes_per_image: (1, 2),
            size_range: (28, 56),
            truncation_prob: 0.1,
            occlusion_prob: 0.1,
            brightness_jitter: 0.2,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn with_classes(n: usize) -> Result<Self> {
        if n == 0 || n > ShapeKind::ALL.len() {
            return Err(Error::Config(format!(
                "between 1 and {} synthetic classes are available, asked for {n}",
                ShapeKind::ALL.len()
            )));
        }
        Ok(SyntheticSceneSpec {
            classes: ShapeKind::ALL[..n].to_vec(),
            ..Self::default()
        })
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        let (smin, smax) = self.shapes_per_image;
        if self.classes.is_empty() || smin == 0 || smin > smax || lo < 6 || lo > hi {
            return Err(Error::Config(format!(
                "invalid synthetic scene spec {self:?}"
            )));
        }
        if hi > self.width.min(self.height) {
            return Err(Error::Config("objects larger than the image".into()));
        }
        Ok(())
    }
}

/// One rendered scene, 8-bit RGB in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub objects: Vec<(ShapeKind, BBox)>,
}

impl Scene {
    pub fn to_ppm(&self) -> Vec<u8> {
        encode_rgb8(self.width, self.height, &self.rgb)
    }
}

type Rgb = [f64; 3];

fn dark_color(rng: &mut Rng64) -> Rgb {
    [0; 3].map(|_| rng.gen_range(0.0..110.0))
}

fn bright_color(rng: &mut Rng64) -> Rgb {
    let mut c = [0; 3].map(|_| rng.gen_range(60.0..255.0));
    let k = rng.gen_range(0..3);
    c[k] = rng.gen_range(215.0..255.0);
    c
}

fn paint_background(mode: BackgroundMode, w: usize, h: usize, rng: &mut Rng64) -> Vec<Rgb> {
    let mode = match mode {
        BackgroundMode::Mixed => [
            BackgroundMode::Flat,
            BackgroundMode::Gradient,
            BackgroundMode::Noise,
        ][rng.gen_range(0..3)],
        m => m,
    };
    let a = dark_color(rng);
    match mode {
        BackgroundMode::Flat | BackgroundMode::Mixed => vec![a; w * h],
        BackgroundMode::Gradient => {
            let b = dark_color(rng);
            let horizontal = rng.gen_bool(0.5);
            (0..w * h)
                .map(|i| {
                    let t = if horizontal {
                        (i % w) as f64 / (w - 1).max(1) as f64
                    } else {
                        (i / w) as f64 / (h - 1).max(1) as f64
                    };
                    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
                })
                .collect()
        }
        BackgroundMode::Noise => (0..w * h)
            .map(|_| {
                let n = rng.gen_range(-25.0..25.0);
                a.map(|v| (v + n).clamp(0.0, 255.0))
            })
            .collect(),
    }
}

struct Layout {
    kind: ShapeKind,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl Layout {
    fn overlaps(&self, o: &Layout, gap: f64) -> bool {
        self.x < o.x + o.w + gap
            && o.x < self.x + self.w + gap
            && self.y < o.y + o.h + gap
            && o.y < self.y + self.h + gap
    }
}

fn layout(spec: &SyntheticSceneSpec, kind: ShapeKind, rng: &mut Rng64) -> Layout {
    let (lo, hi) = spec.size_range;
    let side = rng.gen_range(lo..=hi) as f64;
    let (w, h) = match kind {
        ShapeKind::Bar => {
            if rng.gen_bool(0.5) {
                (side, (side / 2.0).round())
            } else {
                ((side / 2.0).round(), side)
            }
        }
        _ => {
            let aspect = rng.gen_range(0.85..1.18);
            (side, (side * aspect).round().min(hi as f64))
        }
    };
    let (iw, ih) = (spec.width as f64, spec.height as f64);
    let truncated = rng.gen_bool(spec.truncation_prob);
    let (x, y) = if truncated {
        // allow up to 40% of the object to fall outside
        let x = rng.gen_range(-0.4 * w..iw - 0.6 * w);
        let y = rng.gen_range(-0.4 * h..ih - 0.6 * h);
        (x.floor(), y.floor())
    } else {
        (
            rng.gen_range(0.0..=iw - w).floor(),
            rng.gen_range(0.0..=ih - h).floor(),
        )
    };
    Layout { kind, x, y, w, h }
}

/// Paints `l` and returns the exact pixel extent `(x0, y0, x1, y1)` of what
/// was painted, end-exclusive.
fn rasterize(
    l: &Layout,
    color: Rgb,
    pixels: &mut [Rgb],
    w: usize,
    h: usize,
) -> Option<(usize, usize, usize, usize)> {
    let x_lo = l.x.max(0.0) as usize;
    let y_lo = l.y.max(0.0) as usize;
    let x_hi = ((l.x + l.w).ceil().max(0.0) as usize).min(w);
    let y_hi = ((l.y + l.h).ceil().max(0.0) as usize).min(h);
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for py in y_lo..y_hi {
        let v = (py as f64 + 0.5 - l.y) / l.h;
        if !(0.0..1.0).contains(&v) {
            continue;
        }
        for px in x_lo..x_hi {
            let u = (px as f64 + 0.5 - l.x) / l.w;
            if !(0.0..1.0).contains(&u) || !l.kind.contains(u, v) {
                continue;
            }
            pixels[py * w + px] = color;
            ext = Some(match ext {
                None => (px, py, px + 1, py + 1),
                Some((a, b, c, d)) => (a.min(px), b.min(py), c.max(px + 1), d.max(py + 1)),
            });
        }
    }
    ext
}

pub fn render_scene(spec: &SyntheticSceneSpec, rng: &mut Rng64) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut pixels = paint_background(spec.background, w, h, rng);
    let (smin, smax) = spec.shapes_per_image;
    let want = rng.gen_range(smin..=smax);
    let mut placed: Vec<Layout> = Vec::new();
    let mut objects = Vec::new();
    let mut attempts = 0;
    while objects.len() < want && attempts < 200 {
        attempts += 1;
        let kind = spec.classes[rng.gen_range(0..spec.classes.len())];
        let l = layout(spec, kind, rng);
        if placed.iter().any(|p| p.overlaps(&l, 2.0)) {
            continue;
        }
        let color = bright_color(rng);
        let mut trial = pixels.clone();
        let Some((x0, y0, x1, y1)) = rasterize(&l, color, &mut trial, w, h) else {
            continue;
        };
        if x1 - x0 < 6 || y1 - y0 < 6 {
            continue;
        }
        pixels = trial;
        objects.push((kind, BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?));
        placed.push(l);
    }
    if objects.is_empty() {
        return Err(Error::Config(
            "could not place any object; enlarge the image".into(),
        ));
    }
    for (_, b) in &objects {
        if !rng.gen_bool(spec.occlusion_prob) {
            continue;
        }
        // a dark slab over one edge, covering at most a third of the object
        let (bw, bh) = (b.width(), b.height());
        let color = dark_color(rng);
        let depth = rng.gen_range(0.15..0.34);
        let (ox0, oy0, ox1, oy1) = match rng.gen_range(0..4) {
            0 => (b.xmin, b.ymin, b.xmin + bw * depth, b.ymax),
            1 => (b.xmax - bw * depth, b.ymin, b.xmax, b.ymax),
            2 => (b.xmin, b.ymin, b.xmax, b.ymin + bh * depth),
            _ => (b.xmin, b.ymax - bh * depth, b.xmax, b.ymax),
        };
        for py in oy0 as usize..(oy1.ceil() as usize).min(h) {
            for px in ox0 as usize..(ox1.ceil() as usize).min(w) {
                pixels[py * w + px] = color;
            }
        }
    }
    let j = spec.brightness_jitter;
    let gain = if j > 0.0 {
        rng.gen_range(1.0 - j..=1.0 + j)
    } else {
        1.0
    };
    let rgb = pixels
        .iter()
        .flat_map(|p| p.map(|c| (c * gain).round().clamp(0.0, 255.0) as u8))
        .collect();
    Ok(Scene {
        width: w,
        height: h,
        rgb,
        objects,
    })
}

pub fn image_name(i: usize) -> String {
    format!("img_{i:05}.ppm")
}

/// Renders `n_images` scenes into `out_dir` and writes `annotations.tsv`
/// next to them. Returns the unsplit manifest.
pub fn generate_synthetic(
    spec: &SyntheticSceneSpec,
    n_images: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if n_images == 0 {
        return Err(Error::Config("n_images must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = seeded_rng(seed);
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let scene = render_scene(spec, &mut rng)?;
        let name = image_name(i);
        let path = out_dir.join(&name);
        fs::write(&path, scene.to_ppm()).map_err(|e| Error::io(&path, e))?;
        records.push(Annotation {
            image: PathBuf::from(name),
            objects: scene
                .objects
                .iter()
                .map(|(k, b)| GroundTruth {
                    class: k.name().to_string(),
                    bbox: *b,
                })
                .collect(),
        });
    }
    let mut classes: Vec<String> = spec.classes.iter().map(|k| k.name().to_string()).collect();
    classes.sort();
    classes.dedup();
    let manifest = DatasetManifest {
        classes,
        records,
        splits: None,
        seed: Some(seed),
        root: out_dir.to_path_buf(),
    };
    let ann = out_dir.join("annotations.tsv");
    fs::write(&ann, format_annotations(&manifest)).map_err(|e| Error::io(&ann, e))?;
    Ok(manifest)
}
