//! Dense kernels behind the differentiable primitives.

use crate::error::{shape_err, Result};
use crate::par;
use crate::tensor::Tensor;

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rows: isize,
    pub cols: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rows: cols as isize, cols: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rows: 1, cols: cols as isize }
    }
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product; `c` is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() >= extent(m, k, la));
    assert!(k == 0 || n == 0 || b.len() >= extent(k, n, lb));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn extent(r: usize, c: usize, l: Layout) -> usize {
    (r - 1) * l.rows as usize + (c - 1) * l.cols as usize + 1
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        (sa, sb) => return Err(shape_err("matmul", format!("{sa:?} x {sb:?}"))),
    };
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), Layout::row_major(k), b.data(), Layout::row_major(n), 0.0, &mut out);
    Tensor::new([m, n], out)
}

/// Returns `(grad_a, grad_b)` for `c = a · b`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut ga = vec![0.0; m * k];
    gemm(m, n, k, g.data(), Layout::row_major(n), b.data(), Layout::transposed(n), 0.0, &mut ga);
    let mut gb = vec![0.0; k * n];
    gemm(k, m, n, a.data(), Layout::transposed(k), g.data(), Layout::row_major(n), 0.0, &mut gb);
    (
        Tensor::new([m, k], ga).expect("shape"),
        Tensor::new([k, n], gb).expect("shape"),
    )
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let ([_, c, h, w], [o, ci, kh, kw]) = (
            <[usize; 4]>::try_from(input).map_err(|_| shape_err("conv2d", format!("input {input:?}")))?,
            <[usize; 4]>::try_from(weight).map_err(|_| shape_err("conv2d", format!("weight {weight:?}")))?,
        );
        if c != ci {
            return Err(shape_err("conv2d", format!("input channels {c} vs weight {ci}")));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} on {h}x{w}, pad {pad}")));
        }
        Ok(Self { channels: c, height: h, width: w, out_channels: o, kh, kw, stride, pad })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let plane = ho * wo;
        for c in 0..self.channels {
            let xc = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let d = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.height as isize {
                            d.fill(0.0);
                            continue;
                        }
                        let src = &xc[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.width as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let plane = ho * wo;
        for c in 0..self.channels {
            let xc = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut xc[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.width {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let n = x.shape()[0];
    let (ho, wo) = (g.out_h(), g.out_w());
    let in_len = g.channels * g.height * g.width;
    let out_len = g.out_channels * ho * wo;
    let mut out = vec![0.0; n * out_len];
    let (xd, wd) = (x.data(), w.data());
    par::for_each_chunk(&mut out, out_len, |i, o| {
        let xi = &xd[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.out_channels, g.channels, ho * wo, wd, Layout::row_major(g.channels), xi, Layout::row_major(ho * wo), 0.0, o);
        } else {
            let mut col = vec![0.0; g.patch() * ho * wo];
            g.im2col(xi, &mut col);
            gemm(g.out_channels, g.patch(), ho * wo, wd, Layout::row_major(g.patch()), &col, Layout::row_major(ho * wo), 0.0, o);
        }
    });
    Tensor::new([n, g.out_channels, ho, wo], out)
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_backward_input(x_shape: &[usize], w: &Tensor, gout: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x_shape, w.shape(), stride, pad)?;
    let n = x_shape[0];
    let plane = g.out_h() * g.out_w();
    let in_len = g.channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let mut dx = vec![0.0; n * in_len];
    let (gd, wd) = (gout.data(), w.data());
    par::for_each_chunk(&mut dx, in_len, |i, dxi| {
        let go = &gd[i * out_len..(i + 1) * out_len];
        if g.is_pointwise() {
            gemm(g.channels, g.out_channels, plane, wd, Layout::transposed(g.channels), go, Layout::row_major(plane), 0.0, dxi);
        } else {
            let mut col = vec![0.0; g.patch() * plane];
            gemm(g.patch(), g.out_channels, plane, wd, Layout::transposed(g.patch()), go, Layout::row_major(plane), 0.0, &mut col);
            g.col2im(&col, dxi);
        }
    });
    Tensor::new(x_shape.to_vec(), dx)
}

/// Gradient of a convolution with respect to its weight. Per-sample partial
/// products are reduced in sample order.
pub(crate) fn conv2d_backward_weight(x: &Tensor, w_shape: &[usize], gout: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w_shape, stride, pad)?;
    let n = x.shape()[0];
    let plane = g.out_h() * g.out_w();
    let in_len = g.channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let w_len = g.out_channels * g.patch();
    let (xd, gd) = (x.data(), gout.data());
    let mut partial = vec![0.0; n * w_len];
    par::for_each_chunk(&mut partial, w_len, |i, dw| {
        let xi = &xd[i * in_len..(i + 1) * in_len];
        let go = &gd[i * out_len..(i + 1) * out_len];
        if g.is_pointwise() {
            gemm(g.out_channels, plane, g.channels, go, Layout::row_major(plane), xi, Layout::transposed(plane), 0.0, dw);
        } else {
            let mut col = vec![0.0; g.patch() * plane];
            g.im2col(xi, &mut col);
            gemm(g.out_channels, plane, g.patch(), go, Layout::row_major(plane), &col, Layout::transposed(plane), 0.0, dw);
        }
    });
    let mut dw = vec![0.0; w_len];
    for chunk in partial.chunks(w_len) {
        dw.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
    Tensor::new(w_shape.to_vec(), dw)
}

/// Broadcasts `x` to `shape`; every source axis is 1 or matches.
pub(crate) fn broadcast(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let strides = broadcast_strides(x.shape(), shape, "broadcast")?;
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let src = x.data();
    let inner = *shape.last().unwrap_or(&1);
    let inner_stride = strides.last().copied().unwrap_or(0);
    let outer = if inner == 0 { 0 } else { total / inner };
    let mut idx = vec![0usize; shape.len().saturating_sub(1)];
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 0 {
            out.extend(std::iter::repeat_n(src[base], inner));
        } else {
            out.extend_from_slice(&src[base..base + inner]);
        }
        advance(&mut idx, &shape[..shape.len().saturating_sub(1)]);
    }
    if shape.is_empty() {
        out.push(src[0]);
    }
    Tensor::new(shape.to_vec(), out)
}

/// Sums `x` down to `shape`, the adjoint of [`broadcast`].
pub(crate) fn sum_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let strides = broadcast_strides(shape, x.shape(), "sum_to")?;
    let mut out = vec![0.0; shape.iter().product()];
    let full = x.shape();
    let inner = *full.last().unwrap_or(&1);
    let inner_stride = strides.last().copied().unwrap_or(0);
    let src = x.data();
    if full.is_empty() {
        out[0] = src[0];
        return Tensor::new(shape.to_vec(), out);
    }
    let mut idx = vec![0usize; full.len() - 1];
    for row in src.chunks(inner.max(1)) {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 0 {
            out[base] += row.iter().sum::<f64>();
        } else {
            out[base..base + inner].iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        advance(&mut idx, &full[..full.len() - 1]);
    }
    Tensor::new(shape.to_vec(), out)
}

fn broadcast_strides(small: &[usize], big: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if small.len() != big.len() {
        return Err(shape_err(op, format!("{small:?} vs {big:?}")));
    }
    let mut strides = vec![0; small.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        if small[i] == big[i] {
            strides[i] = if small[i] == 1 { 0 } else { acc };
        } else if small[i] == 1 {
            strides[i] = 0;
        } else {
            return Err(shape_err(op, format!("{small:?} vs {big:?}")));
        }
        acc *= small[i];
    }
    Ok(strides)
}

fn advance(idx: &mut [usize], dims: &[usize]) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < dims[d] {
            return;
        }
        idx[d] = 0;
    }
}

pub(crate) fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let mut out = vec![0.0; n * c * 4 * h * w];
    let src = x.data();
    for (p, plane) in out.chunks_mut(4 * h * w).enumerate() {
        let s = &src[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                plane[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new([n, c, 2 * h, 2 * w], out)
}

pub(crate) fn upsample2x_backward(g: &Tensor) -> Result<Tensor> {
    let [n, c, h2, w2] = g.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; n * c * h * w];
    let src = g.data();
    for (p, plane) in out.chunks_mut(h * w).enumerate() {
        let s = &src[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                plane[(y / 2) * w + xx / 2] += s[y * w2 + xx];
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Copies `len` entries starting at `start` along `axis`.
pub(crate) fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(shape_err("slice", format!("axis {axis} [{start}, {}) of {shape:?}", start + len)));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut s = shape.to_vec();
    s[axis] = len;
    Tensor::new(s, out)
}

pub(crate) fn concat_axis(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?.shape();
    if axis >= first.len() {
        return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
    }
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len() || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d]) {
            return Err(shape_err("concat", format!("{s:?} vs {first:?}")));
        }
        total += s[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let k = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * k..(o + 1) * k]);
        }
    }
    let mut s = first.to_vec();
    s[axis] = total;
    Tensor::new(s, out)
}

/// 2×2 max pooling of a `[H, W]` grid.
pub(crate) fn max_pool2(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for xx in 0..wo {
            let a = x[2 * y * w + 2 * xx];
            let b = x[2 * y * w + 2 * xx + 1];
            let c = x[(2 * y + 1) * w + 2 * xx];
            let d = x[(2 * y + 1) * w + 2 * xx + 1];
            out[y * wo + xx] = a.max(b).max(c).max(d);
        }
    }
    out
}
