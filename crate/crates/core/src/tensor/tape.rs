//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! list is topologically sorted by construction and backward is a single
//! reverse sweep.

use super::kernels::{col2im, conv_output_size, gemm, gemm_nt, gemm_tn, im2col, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Half-open rectangle of feature-map cells, `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    Softmax(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    RoiPool {
        input: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn finite(value: Tensor, what: &str) -> Result<Tensor> {
    if value.all_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!(
            "{what} produced a non-finite value"
        )))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant leaf (no gradient is tracked).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = finite(Tensor::new(va.shape(), data)?, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = finite(Tensor::new(va.shape(), data)?, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = finite(Tensor::new(&[m, n], data)?, "matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul { a, b, m, k, n }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let out = finite(Tensor::scalar(s), "sum")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|e| e * c).collect();
        let out = finite(Tensor::new(v.shape(), data)?, "scale")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Scale(x, c), rg))
    }

    /// Adds `bias[n]` to every row of `x[r,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape(format!(
                "add_bias: {sb:?} is not a row bias for {sx:?}"
            )));
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let out = finite(Tensor::new(sx, data)?, "add_bias")?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(0.0)).collect();
        let out = Tensor::new(v.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let k = *v.shape().last().expect("rank >= 1");
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &e in row {
                let ex = (e - max).exp();
                total += ex;
                data.push(ex);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        let out = finite(Tensor::new(v.shape(), data)?, "softmax")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `out.data[i] = x.data[index[i]]`, shaped as `shape`. Repeated indices
    /// are allowed; their gradients add.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Index(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    /// 2-D convolution of `input[C_in,H,W]` with `kernel[C_out,C_in,kh,kw]`
    /// plus `bias[C_out]`, zero padding on all sides.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sk, sb) = (
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
        );
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sb != [sk[0]] {
            return Err(Error::shape(format!(
                "conv2d: input {si:?}, kernel {sk:?}, bias {sb:?} do not conform"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        let (out_h, out_w) = match (
            conv_output_size(si[1], kh, stride, padding),
            conv_output_size(si[2], kw, stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                    si[1] + 2 * padding,
                    si[2] + 2 * padding
                )))
            }
        };
        let geom = ConvGeometry {
            channels: si[0],
            height: si[1],
            width: si[2],
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let mut data = gemm(
            self.value(kernel).data(),
            &cols,
            c_out,
            geom.rows(),
            geom.cols(),
        );
        for (row, b) in data.chunks_mut(geom.cols()).zip(self.value(bias).data()) {
            for v in row {
                *v += b;
            }
        }
        let out = finite(Tensor::new(&[c_out, out_h, out_w], data)?, "conv2d")?;
        let keep_cols = self.rg(kernel);
        let rg = self.rg(input) || keep_cols || self.rg(bias);
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols: keep_cols.then_some(cols),
        };
        Ok(self.push(out, op, rg))
    }

    /// Max pooling over `window × window` patches of `input[C,H,W]`. Ties go
    /// to the lowest linear index.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let v = self.value(input);
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!(
                "maxpool2d: expected [C,H,W], got {s:?}"
            )));
        }
        if window == 0 || stride == 0 || window > s[1] || window > s[2] {
            return Err(Error::shape(format!(
                "maxpool2d: window {window} (stride {stride}) does not fit {}x{}",
                s[1], s[2]
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let src = v.data();
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..window {
                        let row = (ch * h + oy * stride + dy) * w + ox * stride;
                        for dx in 0..window {
                            let e = src[row + dx];
                            if best == usize::MAX || e > best_v {
                                best = row + dx;
                                best_v = e;
                            }
                        }
                    }
                    data.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], data)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    /// Max-pools each region of `input[C,H,W]` into an `out_h × out_w` grid of
    /// roughly equal bins. Output is `[R, C, out_h, out_w]`.
    pub fn roi_pool(
        &mut self,
        input: Var,
        regions: &[FeatureRegion],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let v = self.value(input);
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!(
                "roi_pool: expected [C,H,W], got {s:?}"
            )));
        }
        if regions.is_empty() || out_h == 0 || out_w == 0 {
            return Err(Error::Contract(
                "roi_pool needs regions and a positive grid".into(),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        for r in regions {
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > w || r.y1 > h {
                return Err(Error::Contract(format!(
                    "roi_pool: degenerate region {r:?} on a {w}x{h} map"
                )));
            }
        }
        let src = v.data();
        let mut data = Vec::with_capacity(regions.len() * c * out_h * out_w);
        let mut argmax = Vec::with_capacity(data.capacity());
        for r in regions {
            let ybins = bin_edges(r.y0, r.y1, out_h);
            let xbins = bin_edges(r.x0, r.x1, out_w);
            for ch in 0..c {
                for &(ys, ye) in &ybins {
                    for &(xs, xe) in &xbins {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for y in ys..ye {
                            let row = (ch * h + y) * w;
                            for x in xs..xe {
                                let e = src[row + x];
                                if best == usize::MAX || e > best_v {
                                    best = row + x;
                                    best_v = e;
                                }
                            }
                        }
                        data.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let out = Tensor::new(&[regions.len(), c, out_h, out_w], data)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::RoiPool { input, argmax }, rg))
    }

    /// Mean over rows of `−ln probs[i, labels[i]]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(probs);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: probs {s:?} vs {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -v.data()[i * k + l].ln())
            .sum::<f64>()
            / n;
        let out = finite(Tensor::scalar(loss), "cross_entropy")?;
        let rg = self.rg(probs);
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(out, op, rg))
    }

    /// Smooth-L1 of `pred − target`, summed and divided by the number of rows
    /// (the leading dimension).
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "smooth_l1")?;
        let rows = self.value(pred).shape()[0] as f64;
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| {
                let d = p - t;
                if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                }
            })
            .sum();
        let out = finite(Tensor::scalar(total / rows), "smooth_l1")?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(out, Op::SmoothL1 { pred, target }, rg))
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            self.apply_rule(idx, &grad);
            self.grads[idx] = Some(grad);
        }
        Ok(())
    }

    fn apply_rule(&mut self, idx: usize, grad: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        accumulate(&mut grads[v.0], grad.len(), |g| {
                            g.iter_mut().zip(grad).for_each(|(x, d)| *x += d)
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if rg(v) {
                        let o = val(other).data();
                        accumulate(&mut grads[v.0], grad.len(), |g| {
                            for i in 0..g.len() {
                                g[i] += grad[i] * o[i];
                            }
                        });
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let da = gemm_nt(grad, val(*b).data(), m, n, k);
                    accumulate(&mut grads[a.0], m * k, |g| add_into(g, &da));
                }
                if rg(*b) {
                    let db = gemm_tn(val(*a).data(), grad, m, k, n);
                    accumulate(&mut grads[b.0], k * n, |g| add_into(g, &db));
                }
            }
            Op::Sum(x) => {
                let len = val(*x).len();
                accumulate(&mut grads[x.0], len, |g| {
                    g.iter_mut().for_each(|e| *e += grad[0])
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(&mut grads[x.0], grad.len(), |g| {
                    g.iter_mut().zip(grad).for_each(|(e, d)| *e += c * d)
                });
            }
            Op::AddBias { x, bias } => {
                if rg(*x) {
                    accumulate(&mut grads[x.0], grad.len(), |g| add_into(g, grad));
                }
                if rg(*bias) {
                    let n = val(*bias).len();
                    accumulate(&mut grads[bias.0], n, |g| {
                        for row in grad.chunks(n) {
                            add_into(g, row);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xin = val(*x).data();
                accumulate(&mut grads[x.0], grad.len(), |g| {
                    for i in 0..g.len() {
                        if xin[i] > 0.0 {
                            g[i] += grad[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = nodes[idx].value.data();
                let k = *nodes[idx].value.shape().last().expect("rank >= 1");
                accumulate(&mut grads[x.0], grad.len(), |g| {
                    for ((gr, yr), dr) in g.chunks_mut(k).zip(y.chunks(k)).zip(grad.chunks(k)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                accumulate(&mut grads[x.0], grad.len(), |g| add_into(g, grad));
            }
            Op::Gather { x, index } => {
                let len = val(*x).len();
                accumulate(&mut grads[x.0], len, |g| {
                    for (&i, d) in index.iter().zip(grad) {
                        g[i] += d;
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let c_out = val(*kernel).shape()[0];
                if rg(*bias) {
                    accumulate(&mut grads[bias.0], c_out, |g| {
                        for (gb, row) in g.iter_mut().zip(grad.chunks(geom.cols())) {
                            *gb += row.iter().sum::<f64>();
                        }
                    });
                }
                if rg(*kernel) {
                    let cols = cols.as_ref().expect("im2col saved for kernel grad");
                    let dk = gemm_nt(grad, cols, c_out, geom.cols(), geom.rows());
                    accumulate(&mut grads[kernel.0], dk.len(), |g| add_into(g, &dk));
                }
                if rg(*input) {
                    let dcols = gemm_tn(val(*kernel).data(), grad, c_out, geom.rows(), geom.cols());
                    let len = val(*input).len();
                    accumulate(&mut grads[input.0], len, |g| col2im(&dcols, geom, g));
                }
            }
            Op::MaxPool { input, argmax } | Op::RoiPool { input, argmax } => {
                let len = val(*input).len();
                accumulate(&mut grads[input.0], len, |g| {
                    for (&i, d) in argmax.iter().zip(grad) {
                        g[i] += d;
                    }
                });
            }
            Op::CrossEntropy { probs, labels } => {
                let p = val(*probs);
                let k = p.shape()[1];
                let n = labels.len() as f64;
                accumulate(&mut grads[probs.0], p.len(), |g| {
                    for (i, &l) in labels.iter().enumerate() {
                        g[i * k + l] -= grad[0] / (n * p.data()[i * k + l]);
                    }
                });
            }
            Op::SmoothL1 { pred, target } => {
                let rows = val(*pred).shape()[0] as f64;
                let d: Vec<f64> = val(*pred)
                    .data()
                    .iter()
                    .zip(val(*target).data())
                    .map(|(p, t)| {
                        let x = p - t;
                        let slope = if x.abs() < 1.0 { x } else { x.signum() };
                        slope * grad[0] / rows
                    })
                    .collect();
                if rg(*pred) {
                    accumulate(&mut grads[pred.0], d.len(), |g| add_into(g, &d));
                }
                if rg(*target) {
                    accumulate(&mut grads[target.0], d.len(), |g| {
                        g.iter_mut().zip(&d).for_each(|(e, v)| *e -= v)
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Splits `[start, end)` into `n` bins with rounded boundaries. A bin that
/// rounds to empty is widened to the nearest valid cell.
pub(crate) fn bin_edges(start: usize, end: usize, n: usize) -> Vec<(usize, usize)> {
    let len = (end - start) as f64;
    (0..n)
        .map(|i| {
            let s = start + (i as f64 * len / n as f64).round() as usize;
            let e = start + ((i + 1) as f64 * len / n as f64).round() as usize;
            if e > s {
                (s, e)
            } else {
                let cell = s.min(end - 1);
                (cell, cell + 1)
            }
        })
        .collect()
}
