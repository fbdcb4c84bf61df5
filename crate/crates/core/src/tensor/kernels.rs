//! Plain loops over row-major buffers. Every kernel has a fixed reduction
//! order so results are bit-reproducible.

/// Column block width for [`gemm`]; keeps one output strip in cache while
/// the reduction runs.
const BLOCK: usize = 256;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for j0 in (0..n).step_by(BLOCK) {
        let j1 = (j0 + BLOCK).min(n);
        for i in 0..m {
            let row = &mut out[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n + j0..p * n + j1];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[m,k] = a[m,n] · b[k,n]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = dot(arow, brow);
        }
    }
    out
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `floor((size + 2·padding − kernel) / stride) + 1`, or `None` if the
/// kernel does not fit the padded input.
pub fn conv_output_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − padding` lies
/// inside `[0, width)`.
fn valid_span(
    out_w: usize,
    width: usize,
    stride: usize,
    padding: usize,
    kj: usize,
) -> (usize, usize) {
    let lo = if padding > kj {
        (padding - kj).div_ceil(stride)
    } else {
        0
    };
    let hi = if width + padding > kj {
        ((width + padding - kj - 1) / stride + 1).min(out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `[C,H,W]` into `[C·kh·kw, H'·W']` with zero padding.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ncols = g.cols();
    let mut cols = vec![0.0; g.rows() * ncols];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                let (lo, hi) = valid_span(g.out_w, g.width, g.stride, g.padding, kj);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &input[(c * g.height + iy as usize) * g.width..][..g.width];
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let x0 = lo + kj - g.padding;
                        d[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            d[ox] = src[ox * g.stride + kj - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back into `[C,H,W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    let (lo, hi) = valid_span(g.out_w, g.width, g.stride, g.padding, kj);
                    for ox in lo..hi {
                        out[base + ox * g.stride + kj - g.padding] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}
