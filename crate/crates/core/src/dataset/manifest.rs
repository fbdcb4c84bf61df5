//! Annotation and manifest text formats.
//!
//! Annotation lines are `image<TAB>class<TAB>xmin ymin xmax ymax` with integer
//! pixel coordinates. A manifest adds a leading split column, a column header
//! and `# key=value` metadata lines.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::ppm::ppm_dimensions;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::seeded_rng;

pub const MANIFEST_HEADER: &str = "split\timage\tclass\tbox";

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: String,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    /// Image path as written in the file, relative to the manifest root.
    pub image: PathBuf,
    pub objects: Vec<GroundTruth>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Sorted, unique class names; a class id is its index here.
    pub classes: Vec<String>,
    pub records: Vec<Annotation>,
    /// One entry per record once [`split`] has run.
    pub splits: Option<Vec<Split>>,
    pub seed: Option<u64>,
    /// Directory that relative image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn image_path(&self, record: &Annotation) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn records_in(&self, which: Split) -> Vec<&Annotation> {
        match &self.splits {
            Some(s) => self
                .records
                .iter()
                .zip(s)
                .filter(|(_, &sp)| sp == which)
                .map(|(r, _)| r)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn box_count(&self) -> usize {
        self.records.iter().map(|r| r.objects.len()).sum()
    }
}

fn parse_box(field: &str, line: usize) -> Result<[i64; 4]> {
    let nums: Vec<&str> = field.split_whitespace().collect();
    if nums.len() != 4 {
        return Err(Error::Parse {
            line,
            msg: format!("expected 4 box coordinates, found {}", nums.len()),
        });
    }
    let mut out = [0i64; 4];
    for (o, n) in out.iter_mut().zip(nums) {
        *o = n.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("coordinate {n:?} is not an integer"),
        })?;
    }
    Ok(out)
}

fn make_box(c: [i64; 4], image: &Path) -> Result<BBox> {
    let [x0, y0, x1, y1] = c;
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Validation {
            image: image.display().to_string(),
            msg: format!("box {x0} {y0} {x1} {y1} has no area"),
        });
    }
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

fn push_object(records: &mut Vec<Annotation>, image: PathBuf, obj: GroundTruth) {
    match records.iter_mut().find(|r| r.image == image) {
        Some(r) => r.objects.push(obj),
        None => records.push(Annotation {
            image,
            objects: vec![obj],
        }),
    }
}

fn vocabulary(records: &[Annotation]) -> Vec<String> {
    records
        .iter()
        .flat_map(|r| r.objects.iter().map(|o| o.class.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Parses annotation text without touching image files.
pub fn parse_annotation_text(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (image, class) = (fields[0].trim(), fields[1].trim());
        if image.is_empty() || class.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty image path or class".into(),
            });
        }
        let image = PathBuf::from(image);
        let bbox = make_box(parse_box(fields[2], line)?, &image)?;
        push_object(
            &mut records,
            image,
            GroundTruth {
                class: class.to_string(),
                bbox,
            },
        );
    }
    Ok(DatasetManifest {
        classes: vocabulary(&records),
        records,
        splits: None,
        seed: None,
        root: root.into(),
    })
}

/// Reads an annotation file and validates every box against its image size.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_annotation_text(&text, root)?;
    validate_bounds(&manifest)?;
    Ok(manifest)
}

pub fn validate_bounds(manifest: &DatasetManifest) -> Result<()> {
    for r in &manifest.records {
        let (w, h) = ppm_dimensions(manifest.image_path(r))?;
        for o in &r.objects {
            if !o.bbox.inside(w as f64, h as f64) {
                return Err(Error::Validation {
                    image: r.image.display().to_string(),
                    msg: format!("box {:?} exceeds the {w}x{h} image", o.bbox),
                });
            }
        }
    }
    Ok(())
}

/// Seeded shuffle, then the first `round(ratio · N)` records train.
pub fn split(manifest: &DatasetManifest, ratio_train: f64, seed: u64) -> Result<DatasetManifest> {
    if !(ratio_train > 0.0 && ratio_train < 1.0) {
        return Err(Error::Config(format!(
            "train ratio {ratio_train} not in (0, 1)"
        )));
    }
    let n = manifest.records.len();
    let n_train = (ratio_train * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut splits = vec![Split::Test; n];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    Ok(DatasetManifest {
        splits: Some(splits),
        seed: Some(seed),
        ..manifest.clone()
    })
}

fn box_field(b: &BBox) -> String {
    format!("{} {} {} {}", b.xmin, b.ymin, b.xmax, b.ymax)
}

pub fn format_annotations(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    for r in &manifest.records {
        for o in &r.objects {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                r.image.display(),
                o.class,
                box_field(&o.bbox)
            );
        }
    }
    out
}

pub fn format_manifest(manifest: &DatasetManifest) -> Result<String> {
    let splits = manifest
        .splits
        .as_ref()
        .ok_or_else(|| Error::Contract("manifest has not been split".into()))?;
    let mut out = String::new();
    if let Some(seed) = manifest.seed {
        let _ = writeln!(out, "# seed={seed}");
    }
    let _ = writeln!(out, "# classes={}", manifest.classes.join(","));
    let _ = writeln!(out, "{MANIFEST_HEADER}");
    for (r, s) in manifest.records.iter().zip(splits) {
        for o in &r.objects {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                s.as_str(),
                r.image.display(),
                o.class,
                box_field(&o.bbox)
            );
        }
    }
    Ok(out)
}

/// Parses split manifest text (see [`format_manifest`]).
pub fn parse_manifest_text(text: &str, root: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut seed = None;
    let mut classes: Option<Vec<String>> = None;
    let mut header_seen = false;
    let mut records: Vec<Annotation> = Vec::new();
    let mut splits: Vec<Split> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if let Some(meta) = raw.strip_prefix('#') {
            let meta = meta.trim();
            if let Some(v) = meta.strip_prefix("seed=") {
                seed = Some(v.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("bad seed {v:?}"),
                })?);
            } else if let Some(v) = meta.strip_prefix("classes=") {
                classes = Some(v.split(',').map(|s| s.trim().to_string()).collect());
            }
            continue;
        }
        if !header_seen {
            if raw.trim_end() != MANIFEST_HEADER {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected header {MANIFEST_HEADER:?}"),
                });
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let s = match fields[0] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown split {other:?}"),
                })
            }
        };
        let image = PathBuf::from(fields[1]);
        let bbox = make_box(parse_box(fields[3], line)?, &image)?;
        let obj = GroundTruth {
            class: fields[2].to_string(),
            bbox,
        };
        match records.iter().position(|r| r.image == image) {
            Some(idx) => {
                if splits[idx] != s {
                    return Err(Error::Parse {
                        line,
                        msg: format!("{} appears in both splits", image.display()),
                    });
                }
                records[idx].objects.push(obj);
            }
            None => {
                records.push(Annotation {
                    image,
                    objects: vec![obj],
                });
                splits.push(s);
            }
        }
    }
    if !header_seen {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            msg: "missing manifest header".into(),
        });
    }
    let found = vocabulary(&records);
    let classes = match classes {
        Some(c) => {
            if let Some(missing) = found.iter().find(|f| !c.contains(f)) {
                return Err(Error::Validation {
                    image: "manifest".into(),
                    msg: format!("class {missing:?} is not in the vocabulary"),
                });
            }
            c
        }
        None => found,
    };
    Ok(DatasetManifest {
        classes,
        records,
        splits: Some(splits),
        seed,
        root: root.into(),
    })
}

/// Loads either a split manifest or a bare annotation file (which is then
/// left unsplit).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let is_manifest = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .is_some_and(|l| l.trim_end() == MANIFEST_HEADER);
    let manifest = if is_manifest {
        parse_manifest_text(&text, root)?
    } else {
        parse_annotation_text(&text, root)?
    };
    validate_bounds(&manifest)?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_manifest(manifest)?).map_err(|e| Error::io(path, e))
}
