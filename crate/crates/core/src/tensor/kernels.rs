// Forward and adjoint kernels shared by `Tensor` helpers and the tape.

use super::Tensor;
use crate::error::{Error, Result};

/// (outer, dim, inner) decomposition of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= t.ndim() || start > end || end > t.shape[axis] {
        return Err(Error::invalid(
            "slice",
            format!(
                "range {start}..{end} on axis {axis} is invalid for shape {:?}",
                t.shape
            ),
        ));
    }
    let (outer, dim, inner) = split_at_axis(&t.shape, axis);
    let len = end - start;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        data.extend_from_slice(&t.data[base..base + len * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Tensor::new(shape, data)
}

pub(crate) fn slice_backward(
    input_shape: &[usize],
    axis: usize,
    start: usize,
    grad: &[f64],
    acc: &mut [f64],
) {
    let (outer, dim, inner) = split_at_axis(input_shape, axis);
    let len = grad.len() / (outer * inner).max(1);
    for o in 0..outer {
        let dst = (o * dim + start) * inner;
        let src = o * len * inner;
        for (a, g) in acc[dst..dst + len * inner]
            .iter_mut()
            .zip(&grad[src..src + len * inner])
        {
            *a += g;
        }
    }
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(Error::invalid(
            "concat",
            format!("axis {axis} out of range for shape {:?}", first.shape),
        ));
    }
    for p in &parts[1..] {
        let compatible = p.ndim() == first.ndim()
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &first.shape, &p.shape));
        }
    }
    let (outer, _, inner) = split_at_axis(&first.shape, axis);
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Tensor::new(shape, data)
}

/// Output shape and per-input-element output offsets for a reduction.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for &d in kept.iter().rev() {
        out_strides[d] = stride;
        stride *= shape[d];
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let count = axes.iter().map(|&a| shape[a]).product();
    (out_shape, map, count)
}

pub(crate) fn validate_axes(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
        return Err(Error::invalid(
            op,
            format!("axes {axes:?} invalid for shape {shape:?}"),
        ));
    }
    Ok(sorted)
}

pub(crate) fn mean_axes(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let axes = validate_axes("mean", &t.shape, axes)?;
    let (out_shape, map, count) = reduction_map(&t.shape, &axes);
    if count == 0 {
        return Err(Error::invalid("mean", "reduction over an empty axis"));
    }
    let out_len: usize = out_shape.iter().product();
    let mut out = vec![0.0; out_len];
    for (v, &o) in t.data.iter().zip(&map) {
        out[o] += v;
    }
    let inv = 1.0 / count as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(out_shape, out)
}

pub(crate) fn mean_axes_backward(input_shape: &[usize], axes: &[usize], grad: &[f64], acc: &mut [f64]) {
    let (_, map, count) = reduction_map(input_shape, axes);
    let inv = 1.0 / count as f64;
    for (a, &o) in acc.iter_mut().zip(&map) {
        *a += grad[o] * inv;
    }
}

/// `a[m,k] · b[k,n]`, accumulated into `out[m,n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `a[m,k] · b[n,k]ᵀ`, accumulated into `out[m,n]`.
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `a[k,m]ᵀ · b[k,n]`, accumulated into `out[m,n]`.
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output positions `[lo, hi)` whose input coordinate `pos*stride + k - pad` lies in `[0, len)`.
    fn valid(&self, out_len: usize, in_len: usize, k: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        let hi = if in_len + self.pad > k {
            ((in_len + self.pad - k - 1) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.o * plane];
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            dst.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = g.valid(g.oh, g.h, ki);
                    for kj in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (ow_lo, ow_hi) = g.valid(g.ow, g.w, kj);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let row = &src[ih * g.w..(ih + 1) * g.w];
                            let drow = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                            for ow in ow_lo..ow_hi {
                                drow[ow] += wv * row[ow * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias adjoints of `conv2d`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &ConvGeometry,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let plane = g.oh * g.ow;
    if let Some(db) = db {
        for n in 0..g.n {
            for o in 0..g.o {
                db[o] += grad[(n * g.o + o) * plane..(n * g.o + o + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.n {
        for o in 0..g.o {
            let gplane = &grad[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            for c in 0..g.c {
                let xoff = (n * g.c + c) * g.h * g.w;
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = g.valid(g.oh, g.h, ki);
                    for kj in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                        let wv = w[widx];
                        let (ow_lo, ow_hi) = g.valid(g.ow, g.w, kj);
                        let mut wacc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + ki - g.pad;
                            let grow = &gplane[oh * g.ow..(oh + 1) * g.ow];
                            let base = xoff + ih * g.w;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kj - g.pad;
                                let gv = grow[ow];
                                wacc += x[base + iw] * gv;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[base + iw] += wv * gv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn log_softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

pub(crate) fn log_softmax_backward(y: &[f64], grad: &[f64], cols: usize, acc: &mut [f64]) {
    for ((yr, gr), ar) in y.chunks(cols).zip(grad.chunks(cols)).zip(acc.chunks_mut(cols)) {
        let gsum: f64 = gr.iter().sum();
        for ((a, yv), gv) in ar.iter_mut().zip(yr).zip(gr) {
            *a += gv - yv.exp() * gsum;
        }
    }
}

pub(crate) const NORM_FLOOR: f64 = 1e-12;

pub(crate) fn l2_normalize(x: &[f64], group: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(group) {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        out.extend(chunk.iter().map(|v| v / norm));
    }
    out
}

pub(crate) fn l2_normalize_backward(x: &[f64], grad: &[f64], group: usize, acc: &mut [f64]) {
    for ((xr, gr), ar) in x.chunks(group).zip(grad.chunks(group)).zip(acc.chunks_mut(group)) {
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            // Below the floor the op is a constant rescale.
            for (a, gv) in ar.iter_mut().zip(gr) {
                *a += gv / NORM_FLOOR;
            }
            continue;
        }
        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / norm;
        for ((a, xv), gv) in ar.iter_mut().zip(xr).zip(gr) {
            *a += (gv - xv / norm * dot) / norm;
        }
    }
}
