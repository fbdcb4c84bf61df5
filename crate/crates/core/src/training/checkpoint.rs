//! Binary checkpoint format.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! magic "FRCKv1" | u32 version
//! u32 n_classes, n × str                     (str = u32 length + UTF-8)
//! detector configuration
//! u64 iteration
//! u32 n_tensors, n × (str name, u32 rank, rank × u64 dim, u64 offset, u64 count)
//! u64 n_history, n × 5 f64
//! u64 data_bytes, data
//! ```
//!
//! Tensor offsets are byte offsets into the trailing data block. Momentum
//! buffers are stored as tensors named `momentum:<parameter>`.

use std::path::Path;

use super::loss::LossBreakdown;
use crate::detector::{
    BackboneConfig, DetectorConfig, LayerSpec, Model, ModelParameters, ProposalConfig,
};
use crate::error::{Error, Result};
use crate::geometry::AnchorConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"FRCKv1";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum:";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Momentum buffers in parameter order; empty before the first update.
    pub velocity: Vec<Vec<f64>>,
    pub iteration: u64,
    pub history: Vec<LossBreakdown>,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.pos as u64, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::format(at as u64, format!("{what} {v} is too large")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(at as u64, format!("{what} is not valid UTF-8")))
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u32(what)? as usize;
        if n > (self.data.len() - self.pos) / 8 {
            return Err(self.err(format!("{what} length {n} exceeds the file")));
        }
        (0..n).map(|_| self.f64(what)).collect()
    }
}

fn write_config(w: &mut Writer, c: &DetectorConfig) {
    w.usize(c.input_w);
    w.usize(c.input_h);
    w.usize(c.anchors.stride);
    w.f64(c.anchors.base_size);
    w.f64s(&c.anchors.scales);
    w.f64s(&c.anchors.ratios);
    w.usize(c.backbone.downsample);
    w.u32(c.backbone.layers.len() as u32);
    for layer in &c.backbone.layers {
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                w.u8(0);
                [out_channels, kernel, stride, padding]
                    .iter()
                    .for_each(|&v| w.usize(v));
            }
            LayerSpec::MaxPool { window, stride } => {
                w.u8(1);
                w.usize(window);
                w.usize(stride);
            }
            LayerSpec::Relu => w.u8(2),
        }
    }
    w.usize(c.rpn_channels);
    w.usize(c.pool_h);
    w.usize(c.pool_w);
    w.usize(c.hidden);
    w.usize(c.proposals.pre_nms_n);
    w.usize(c.proposals.post_nms_n);
    w.f64(c.proposals.nms_threshold);
    w.f64(c.proposals.min_size);
    w.f64(c.confidence_threshold);
    w.f64(c.class_nms_threshold);
}

fn read_config(r: &mut Reader) -> Result<DetectorConfig> {
    let input_w = r.usize("input width")?;
    let input_h = r.usize("input height")?;
    let anchors = AnchorConfig {
        stride: r.usize("anchor stride")?,
        base_size: r.f64("anchor base size")?,
        scales: r.f64s("anchor scales")?,
        ratios: r.f64s("anchor ratios")?,
    };
    let downsample = r.usize("backbone downsample")?;
    let n = r.u32("layer count")?;
    let mut layers = Vec::new();
    for _ in 0..n {
        let at = r.pos;
        layers.push(match r.u8("layer kind")? {
            0 => LayerSpec::Conv {
                out_channels: r.usize("conv channels")?,
                kernel: r.usize("conv kernel")?,
                stride: r.usize("conv stride")?,
                padding: r.usize("conv padding")?,
            },
            1 => LayerSpec::MaxPool {
                window: r.usize("pool window")?,
                stride: r.usize("pool stride")?,
            },
            2 => LayerSpec::Relu,
            k => return Err(Error::format(at as u64, format!("unknown layer kind {k}"))),
        });
    }
    Ok(DetectorConfig {
        input_w,
        input_h,
        anchors,
        backbone: BackboneConfig { layers, downsample },
        rpn_channels: r.usize("rpn channels")?,
        pool_h: r.usize("pool height")?,
        pool_w: r.usize("pool width")?,
        hidden: r.usize("hidden width")?,
        proposals: ProposalConfig {
            pre_nms_n: r.usize("pre-NMS count")?,
            post_nms_n: r.usize("post-NMS count")?,
            nms_threshold: r.f64("NMS threshold")?,
            min_size: r.f64("minimum proposal size")?,
        },
        confidence_threshold: r.f64("confidence threshold")?,
        class_nms_threshold: r.f64("class NMS threshold")?,
    })
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ckpt.model.params;
    if !ckpt.velocity.is_empty()
        && (ckpt.velocity.len() != params.tensors.len()
            || ckpt
                .velocity
                .iter()
                .zip(&params.tensors)
                .any(|(v, t)| v.len() != t.len()))
    {
        return Err(Error::Contract(
            "momentum state does not match the parameters".into(),
        ));
    }
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(ckpt.model.classes.len() as u32);
    ckpt.model.classes.iter().for_each(|c| w.str(c));
    write_config(&mut w, &ckpt.model.config);
    w.u64(ckpt.iteration);

    let mut entries: Vec<(String, &[usize], &[f64])> = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| (n.clone(), t.shape(), t.data()))
        .collect();
    for ((n, t), v) in params.names.iter().zip(&params.tensors).zip(&ckpt.velocity) {
        entries.push((format!("{MOMENTUM_PREFIX}{n}"), t.shape(), v.as_slice()));
    }
    w.u32(entries.len() as u32);
    let mut offset = 0usize;
    for (name, shape, data) in &entries {
        w.str(name);
        w.u32(shape.len() as u32);
        shape.iter().for_each(|&d| w.usize(d));
        w.usize(offset);
        w.usize(data.len());
        offset += 8 * data.len();
    }
    w.usize(ckpt.history.len());
    for b in &ckpt.history {
        b.parts().iter().for_each(|&v| w.f64(v));
    }
    w.usize(offset);
    for (_, _, data) in &entries {
        data.iter().for_each(|&v| w.f64(v));
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        data: bytes,
        pos: 0,
    };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            MAGIC.len() as u64,
            format!("unsupported checkpoint version {version} (expected {VERSION})"),
        ));
    }
    let n = r.u32("class count")?;
    let classes = (0..n)
        .map(|_| r.str("class name"))
        .collect::<Result<Vec<_>>>()?;
    let config_at = r.pos;
    let config = read_config(&mut r)?;
    config
        .validate()
        .map_err(|e| Error::format(config_at as u64, format!("invalid configuration: {e}")))?;
    let iteration = r.u64("iteration")?;

    let n_entries = r.u32("tensor count")?;
    let mut table = Vec::new();
    for _ in 0..n_entries {
        let name = r.str("tensor name")?;
        let rank = r.u32("tensor rank")?;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(r.usize("tensor dimension")?);
        }
        let at = r.pos;
        let offset = r.usize("tensor offset")?;
        let count = r.usize("tensor length")?;
        if shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) != Some(count) {
            return Err(Error::format(
                at as u64,
                format!("tensor {name} length does not match its shape"),
            ));
        }
        table.push((name, shape, offset, count, at));
    }
    let n_hist = r.usize("history length")?;
    if n_hist > (bytes.len() - r.pos) / 40 {
        return Err(r.err(format!("history length {n_hist} exceeds the file")));
    }
    let mut history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        let mut p = [0.0; 5];
        for v in &mut p {
            *v = r.f64("loss history")?;
        }
        history.push(LossBreakdown::from_parts(p));
    }
    let data_len = r.usize("data length")?;
    let data_start = r.pos;
    let data = r.take(data_len, "tensor data")?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }

    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut velocity = Vec::new();
    let mut momentum_names = Vec::new();
    for (name, shape, offset, count, at) in table {
        let end = count.checked_mul(8).and_then(|b| b.checked_add(offset));
        let Some(end) = end.filter(|&e| e <= data.len()) else {
            return Err(Error::format(
                at as u64,
                format!("tensor {name} lies outside the data block"),
            ));
        };
        let values: Vec<f64> = data[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(p) = name.strip_prefix(MOMENTUM_PREFIX) {
            momentum_names.push(p.to_string());
            velocity.push(values);
        } else {
            let t = Tensor::new(&shape, values)
                .map_err(|e| Error::format(at as u64, format!("tensor {name}: {e}")))?;
            names.push(name);
            tensors.push(t);
        }
    }
    if !velocity.is_empty() && momentum_names != names {
        return Err(Error::format(
            data_start as u64,
            "momentum buffers do not match the parameters",
        ));
    }
    let params = ModelParameters { names, tensors };
    let model = Model::from_parts(config, classes, params).map_err(|e| {
        Error::format(
            data_start as u64,
            format!("parameters do not fit the model: {e}"),
        )
    })?;
    Ok(Checkpoint {
        model,
        velocity,
        iteration,
        history,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
