//! Forward and backward kernels on raw tensors.
//!
//! These functions know nothing about the autodiff graph; [`super::Graph`]
//! records their saved state and calls the backward halves.
//!
//! Every kernel parallelises over independent output chunks (planes or
//! channels) and reduces within a chunk in a fixed order, so the output is
//! bitwise identical across [`Execution`] modes and thread counts.

use super::parallel::Execution;
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with `padding = dilation`, which preserves spatial size for 3×3 kernels.
    pub const fn same_3x3(dilation: usize) -> Self {
        Self::new(1, dilation, dilation)
    }

    /// `floor((input + 2p − d·(k−1) − 1) / s) + 1`, or `None` when non-positive.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        if kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return None;
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

/// Output range `[lo, hi)` along one axis for which tap `t` reads inside the input.
fn tap_range(out: usize, input: usize, t: usize, g: &ConvGeometry) -> (usize, usize) {
    let off = (t * g.dilation) as isize - g.padding as isize;
    let s = g.stride;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let max_in = input as isize - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / s + 1).min(out);
    (lo.min(hi), hi)
}

#[inline]
fn input_index(o: usize, t: usize, g: &ConvGeometry) -> usize {
    o * g.stride + t * g.dilation - g.padding
}

#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight fixed accumulator lanes (deterministic order).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn conv_shapes(
    x: Shape,
    w: Shape,
    bias: Option<usize>,
    g: &ConvGeometry,
) -> Result<(usize, usize)> {
    if w.c != x.c {
        return Err(Error::dim(
            "conv2d",
            format!("input {x} has {} channels, weight {w} expects {}", x.c, w.c),
        ));
    }
    if let Some(b) = bias {
        if b != w.n {
            return Err(Error::dim(
                "conv2d",
                format!("bias has {b} entries for {} output channels", w.n),
            ));
        }
    }
    match (g.out_extent(x.h, w.h), g.out_extent(x.w, w.w)) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((ho, wo)),
        _ => Err(Error::dim(
            "conv2d",
            format!(
                "non-positive output extent: input {x}, kernel {}x{}, stride {}, padding {}, dilation {}",
                w.h, w.w, g.stride, g.padding, g.dilation
            ),
        )),
    }
}

/// Convolution, `out[i,o,y,x] = b[o] + Σ x[i,j,y·s−p+u·d, x·s−p+v·d]·w[o,j,u,v]`.
///
/// Each output element accumulates its taps in `(j, u, v)` order starting
/// from the bias, exactly as [`conv2d_reference`], so the two agree bitwise.
/// Padding taps contribute `w·0`, which leaves every partial sum unchanged
/// unless the bias is `-0.0` or a weight is not finite; those cases take a
/// direct path that skips them.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    g: ConvGeometry,
    exec: Execution,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let (ho, wo) = conv_shapes(xs, ws, bias.map(<[T]>::len), &g)?;
    let neg_zero = bias.is_some_and(|b| b.iter().any(|v| v.is_zero() && v.is_sign_negative()));
    if neg_zero || !w.all_finite() {
        return conv2d_direct(x, w, bias, g, exec);
    }
    let co = ws.n;
    let k = ws.c * ws.h * ws.w;
    let plane = ho * wo;
    let out_shape = Shape::new(xs.n, co, ho, wo);
    let mut out = vec![T::zero(); out_shape.len()];
    let mut col = Vec::new();
    for (i, dst) in out.chunks_mut(co * plane).enumerate() {
        for (o, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(bias.map_or(T::zero(), |b| b[o]));
        }
        let cols = im2col(x, i, ws, ho, wo, &g, &mut col);
        gemm_acc(dst, plane, w.data(), k, cols, exec);
    }
    Ok(Tensor::from_vec(out_shape, out))
}

/// Naive per-element convolution; the correctness anchor for [`conv2d_forward`].
pub fn conv2d_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let (ho, wo) = conv_shapes(xs, ws, bias.map(<[T]>::len), &g)?;
    let out_shape = Shape::new(xs.n, ws.n, ho, wo);
    let mut out = Vec::with_capacity(out_shape.len());
    for i in 0..xs.n {
        for o in 0..ws.n {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias.map_or(T::zero(), |b| b[o]);
                    for j in 0..ws.c {
                        for u in 0..ws.h {
                            for v in 0..ws.w {
                                let iy = (y * g.stride + u * g.dilation) as isize - g.padding as isize;
                                let ix = (xo * g.stride + v * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x.get(i, j, iy as usize, ix as usize) * w.get(o, j, u, v);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(Tensor::from_vec(out_shape, out))
}

/// Row-axpy convolution that skips out-of-range taps instead of reading zeros.
fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    g: ConvGeometry,
    exec: Execution,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let (ho, wo) = conv_shapes(xs, ws, bias.map(<[T]>::len), &g)?;
    let (co, ci, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let out_shape = Shape::new(xs.n, co, ho, wo);
    let plane = ho * wo;
    let in_plane = xs.plane();
    let rows: Vec<(usize, usize)> = (0..kh).map(|u| tap_range(ho, xs.h, u, &g)).collect();
    let cols: Vec<(usize, usize)> = (0..kw).map(|v| tap_range(wo, xs.w, v, &g)).collect();
    let xd = x.data();
    let wd = w.data();

    let mut out = vec![T::zero(); out_shape.len()];
    exec.for_each_chunk(&mut out, plane, |idx, dst| {
        let (i, o) = (idx / co, idx % co);
        dst.fill(bias.map_or(T::zero(), |b| b[o]));
        for j in 0..ci {
            let src = &xd[(i * ci + j) * in_plane..][..in_plane];
            let taps = &wd[(o * ci + j) * kh * kw..][..kh * kw];
            for u in 0..kh {
                let (y_lo, y_hi) = rows[u];
                for v in 0..kw {
                    let (x_lo, x_hi) = cols[v];
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wv = taps[u * kw + v];
                    for y in y_lo..y_hi {
                        let iy = input_index(y, u, &g);
                        let src_row = &src[iy * xs.w..][..xs.w];
                        let dst_row = &mut dst[y * wo + x_lo..y * wo + x_hi];
                        if g.stride == 1 {
                            let start = input_index(x_lo, v, &g);
                            axpy(dst_row, wv, &src_row[start..start + (x_hi - x_lo)]);
                        } else {
                            for (k, d) in dst_row.iter_mut().enumerate() {
                                *d += wv * src_row[input_index(x_lo + k, v, &g)];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_vec(out_shape, out))
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<T: Scalar>(
    dout: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: Shape,
    g: ConvGeometry,
    exec: Execution,
) -> Tensor<T> {
    let ds = dout.shape();
    let ws = w.shape();
    let (co, k) = (ws.n, ws.c * ws.h * ws.w);
    let plane = ds.h * ds.w;
    let wt = transpose(w.data(), co, k);
    let mut dx = vec![T::zero(); x_shape.len()];
    let mut dcol = vec![T::zero(); k * plane];
    for (i, dst) in dx.chunks_mut(x_shape.c * x_shape.plane()).enumerate() {
        dcol.fill(T::zero());
        let grad = &dout.data()[i * co * plane..][..co * plane];
        gemm_acc(&mut dcol, plane, &wt, co, grad, exec);
        col2im(&dcol, dst, x_shape, ws, ds.h, ds.w, &g, exec);
    }
    Tensor::from_vec(x_shape, dx)
}

/// Gradient with respect to the convolution weight.
pub fn conv2d_backward_weight<T: Scalar>(
    dout: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: Shape,
    g: ConvGeometry,
    exec: Execution,
) -> Tensor<T> {
    let ds = dout.shape();
    let (co, k) = (w_shape.n, w_shape.c * w_shape.h * w_shape.w);
    let plane = ds.h * ds.w;
    let mut dw = vec![T::zero(); w_shape.len()];
    let mut col = Vec::new();
    for i in 0..ds.n {
        let col_t = transpose(im2col(x, i, w_shape, ds.h, ds.w, &g, &mut col), k, plane);
        let grad = &dout.data()[i * co * plane..][..co * plane];
        gemm_acc(&mut dw, k, grad, plane, &col_t, exec);
    }
    Tensor::from_vec(w_shape, dw)
}

/// Sample `i` of `x` unfolded into a `(c·kh·kw) × (ho·wo)` matrix with zero
/// padding. A 1×1 stride-1 unpadded kernel borrows the input directly.
fn im2col<'a, T: Scalar>(
    x: &'a Tensor<T>,
    i: usize,
    ws: Shape,
    ho: usize,
    wo: usize,
    g: &ConvGeometry,
    buf: &'a mut Vec<T>,
) -> &'a [T] {
    let xs = x.shape();
    let sample = &x.data()[i * xs.c * xs.plane()..][..xs.c * xs.plane()];
    if ws.h == 1 && ws.w == 1 && g.stride == 1 && g.padding == 0 {
        return sample;
    }
    let (kh, kw) = (ws.h, ws.w);
    let plane = ho * wo;
    let rows: Vec<(usize, usize)> = (0..kh).map(|u| tap_range(ho, xs.h, u, g)).collect();
    let cols: Vec<(usize, usize)> = (0..kw).map(|v| tap_range(wo, xs.w, v, g)).collect();
    buf.clear();
    buf.resize(xs.c * kh * kw * plane, T::zero());
    for (r, dst) in buf.chunks_mut(plane).enumerate() {
        let (j, u, v) = (r / (kh * kw), r / kw % kh, r % kw);
        let src = &sample[j * xs.plane()..][..xs.plane()];
        let ((y_lo, y_hi), (x_lo, x_hi)) = (rows[u], cols[v]);
        if x_lo >= x_hi {
            continue;
        }
        for y in y_lo..y_hi {
            let src_row = &src[input_index(y, u, g) * xs.w..][..xs.w];
            let dst_row = &mut dst[y * wo + x_lo..y * wo + x_hi];
            if g.stride == 1 {
                let start = input_index(x_lo, v, g);
                dst_row.copy_from_slice(&src_row[start..start + (x_hi - x_lo)]);
            } else {
                for (k, d) in dst_row.iter_mut().enumerate() {
                    *d = src_row[input_index(x_lo + k, v, g)];
                }
            }
        }
    }
    buf
}

/// Adjoint of [`im2col`]: scatters `dcol` back onto one sample's input planes.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcol: &[T],
    dst: &mut [T],
    xs: Shape,
    ws: Shape,
    ho: usize,
    wo: usize,
    g: &ConvGeometry,
    exec: Execution,
) {
    let (kh, kw) = (ws.h, ws.w);
    let plane = ho * wo;
    let rows: Vec<(usize, usize)> = (0..kh).map(|u| tap_range(ho, xs.h, u, g)).collect();
    let cols: Vec<(usize, usize)> = (0..kw).map(|v| tap_range(wo, xs.w, v, g)).collect();
    exec.for_each_chunk(dst, xs.plane(), |j, dst| {
        for u in 0..kh {
            let (y_lo, y_hi) = rows[u];
            for v in 0..kw {
                let (x_lo, x_hi) = cols[v];
                if x_lo >= x_hi {
                    continue;
                }
                let src = &dcol[((j * kh + u) * kw + v) * plane..][..plane];
                for y in y_lo..y_hi {
                    let src_row = &src[y * wo + x_lo..y * wo + x_hi];
                    let dst_row = &mut dst[input_index(y, u, g) * xs.w..][..xs.w];
                    if g.stride == 1 {
                        let start = input_index(x_lo, v, g);
                        for (d, &s) in dst_row[start..start + (x_hi - x_lo)].iter_mut().zip(src_row) {
                            *d += s;
                        }
                    } else {
                        for (k, &s) in src_row.iter().enumerate() {
                            dst_row[input_index(x_lo + k, v, g)] += s;
                        }
                    }
                }
            }
        }
    });
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for (r, row) in a.chunks(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

const GEMM_ROWS: usize = 4;
const GEMM_COLS: usize = 8;

/// `out[m, p] += Σ_k a[m, k]·b[k, p]` with `k` ascending for every element,
/// where `out` is `M × n`, `a` is `M × k` and `b` is `k × n`. Row blocks run
/// in parallel.
fn gemm_acc<T: Scalar>(out: &mut [T], n: usize, a: &[T], k: usize, b: &[T], exec: Execution) {
    exec.for_each_chunk(out, GEMM_ROWS * n, |blk, dst| {
        let a = &a[blk * GEMM_ROWS * k..];
        match dst.len() / n {
            4 => gemm_rows::<T, 4>(dst, n, a, k, b),
            3 => gemm_rows::<T, 3>(dst, n, a, k, b),
            2 => gemm_rows::<T, 2>(dst, n, a, k, b),
            _ => gemm_rows::<T, 1>(dst, n, a, k, b),
        }
    });
}

fn gemm_rows<T: Scalar, const R: usize>(out: &mut [T], n: usize, a: &[T], k: usize, b: &[T]) {
    let mut p = 0;
    while p + GEMM_COLS <= n {
        gemm_tile::<T, R, GEMM_COLS>(out, n, a, k, b, p);
        p += GEMM_COLS;
    }
    while p + 2 <= n {
        gemm_tile::<T, R, 2>(out, n, a, k, b, p);
        p += 2;
    }
    if p < n {
        gemm_tile::<T, R, 1>(out, n, a, k, b, p);
    }
}

#[inline(always)]
fn gemm_tile<T: Scalar, const R: usize, const C: usize>(out: &mut [T], n: usize, a: &[T], k: usize, b: &[T], p: usize) {
    let mut acc = [[T::zero(); C]; R];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[r * n + p..][..C]);
    }
    let a_rows: [&[T]; R] = std::array::from_fn(|r| &a[r * k..][..k]);
    for (kk, b_row) in b.chunks_exact(n).take(k).enumerate() {
        let b_row: &[T; C] = b_row[p..p + C].try_into().expect("tile width");
        for r in 0..R {
            let av = a_rows[r][kk];
            for c in 0..C {
                acc[r][c] += av * b_row[c];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[r * n + p..][..C].copy_from_slice(row);
    }
}

/// Gradient with respect to the per-channel bias, shape (1, c, 1, 1).
pub fn conv2d_backward_bias<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let s = dout.shape();
    let mut db = vec![T::zero(); s.c];
    for i in 0..s.n {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dout.plane(i, o).iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    Tensor::vector(db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// Non-overlapping window of side `k`.
    pub const fn square(k: usize) -> Self {
        Self::new(k, k, 0)
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (self.kernel >= 1 && self.stride >= 1 && padded >= self.kernel)
            .then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Max pooling with implicit −∞ padding. Returns the output and, per output
/// element, the flat input index of the first maximum in row-major scan order.
pub fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    g: PoolGeometry,
    exec: Execution,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let xs = x.shape();
    if 2 * g.padding > g.kernel {
        return Err(Error::dim(
            "max_pool2d",
            format!("padding {} exceeds half the window {}", g.padding, g.kernel),
        ));
    }
    let (ho, wo) = match (g.out_extent(xs.h), g.out_extent(xs.w)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::dim(
                "max_pool2d",
                format!("window {} larger than input {xs}", g.kernel),
            ))
        }
    };
    let out_shape = Shape::new(xs.n, xs.c, ho, wo);
    let plane = ho * wo;
    let xd = x.data();
    let planes: Vec<(Vec<T>, Vec<usize>)> = exec.map(xs.n * xs.c, |idx| {
        let base = idx * xs.plane();
        let mut vals = Vec::with_capacity(plane);
        let mut args = Vec::with_capacity(plane);
        for y in 0..ho {
            for xo in 0..wo {
                let mut best = T::neg_infinity();
                let mut arg = usize::MAX;
                for u in 0..g.kernel {
                    let iy = (y * g.stride + u) as isize - g.padding as isize;
                    if iy < 0 || iy >= xs.h as isize {
                        continue;
                    }
                    for v in 0..g.kernel {
                        let ix = (xo * g.stride + v) as isize - g.padding as isize;
                        if ix < 0 || ix >= xs.w as isize {
                            continue;
                        }
                        let k = base + iy as usize * xs.w + ix as usize;
                        if arg == usize::MAX || xd[k] > best {
                            best = xd[k];
                            arg = k;
                        }
                    }
                }
                vals.push(best);
                args.push(arg);
            }
        }
        (vals, args)
    });
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for (v, a) in planes {
        out.extend(v);
        argmax.extend(a);
    }
    Ok((Tensor::from_vec(out_shape, out), argmax))
}

/// Routes each output gradient to its saved input index.
pub fn scatter_backward<T: Scalar>(dout: &Tensor<T>, argmax: &[usize], x_shape: Shape) -> Tensor<T> {
    let mut dx = vec![T::zero(); x_shape.len()];
    for (&k, &gv) in argmax.iter().zip(dout.data()) {
        dx[k] += gv;
    }
    Tensor::from_vec(x_shape, dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Per-channel reduction over all spatial positions → (n, c, 1, 1).
pub fn global_pool_forward<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::dim("global_pool", format!("empty spatial extent {s}")));
    }
    let mut out = Vec::with_capacity(s.n * s.c);
    let mut argmax = Vec::new();
    for i in 0..s.n {
        for j in 0..s.c {
            let p = x.plane(i, j);
            match mode {
                PoolMode::Avg => {
                    out.push(p.iter().fold(T::zero(), |a, &v| a + v) / T::cast(p.len() as f64))
                }
                PoolMode::Max => {
                    let (k, v) = first_max(p);
                    out.push(v);
                    argmax.push((i * s.c + j) * s.plane() + k);
                }
            }
        }
    }
    Ok((Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out), argmax))
}

pub fn global_avg_backward<T: Scalar>(dout: &Tensor<T>, x_shape: Shape) -> Tensor<T> {
    let scale = T::one() / T::cast(x_shape.plane() as f64);
    let p = x_shape.plane();
    let mut dx = Vec::with_capacity(x_shape.len());
    for &gv in dout.data() {
        dx.extend(std::iter::repeat_n(gv * scale, p));
    }
    Tensor::from_vec(x_shape, dx)
}

fn first_max<T: Scalar>(values: &[T]) -> (usize, T) {
    let mut best = (0, values[0]);
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

/// Per-position reduction across channels → (n, 1, h, w).
pub fn channel_reduce_forward<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.c == 0 {
        return Err(Error::dim("channel_reduce", format!("no channels in {s}")));
    }
    let p = s.plane();
    let mut out = vec![T::zero(); s.n * p];
    let mut argmax = vec![0usize; if mode == PoolMode::Max { s.n * p } else { 0 }];
    let inv = T::one() / T::cast(s.c as f64);
    for i in 0..s.n {
        let dst = &mut out[i * p..(i + 1) * p];
        match mode {
            PoolMode::Avg => {
                for j in 0..s.c {
                    for (d, &v) in dst.iter_mut().zip(x.plane(i, j)) {
                        *d += v;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
            PoolMode::Max => {
                let args = &mut argmax[i * p..(i + 1) * p];
                dst.copy_from_slice(x.plane(i, 0));
                for (k, a) in args.iter_mut().enumerate() {
                    *a = s.offset(i, 0, 0, 0) + k;
                }
                for j in 1..s.c {
                    let base = s.offset(i, j, 0, 0);
                    for (k, &v) in x.plane(i, j).iter().enumerate() {
                        if v > dst[k] {
                            dst[k] = v;
                            args[k] = base + k;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), out), argmax))
}

pub fn channel_avg_backward<T: Scalar>(dout: &Tensor<T>, x_shape: Shape) -> Tensor<T> {
    let inv = T::one() / T::cast(x_shape.c as f64);
    let p = x_shape.plane();
    let mut dx = Vec::with_capacity(x_shape.len());
    for i in 0..x_shape.n {
        let g = dout.plane(i, 0);
        for _ in 0..x_shape.c {
            dx.extend(g.iter().map(|&v| v * inv));
        }
    }
    debug_assert_eq!(dx.len(), x_shape.n * x_shape.c * p);
    Tensor::from_vec(x_shape, dx)
}

/// One axis of a half-pixel bilinear resampling: source taps and the blend
/// fraction toward the second tap.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

impl<T: Scalar> AxisTaps<T> {
    /// `src = (dst + 0.5)·in/out − 0.5`, clamped to `[0, in − 1]`.
    pub fn half_pixel(input: usize, output: usize) -> Self {
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        let last = (input - 1) as f64;
        for d in 0..output {
            let src = ((d as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(T::cast(src - lo as f64));
        }
        taps
    }
}

/// Bilinear resampling tables saved for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizeTable<T> {
    pub rows: AxisTaps<T>,
    pub cols: AxisTaps<T>,
}

/// Half-pixel bilinear resize to `(ho, wo)`. Blends as `a + f·(b − a)`, so a
/// constant field stays exactly constant.
pub fn resize_bilinear_forward<T: Scalar>(
    x: &Tensor<T>,
    ho: usize,
    wo: usize,
    exec: Execution,
) -> Result<(Tensor<T>, ResizeTable<T>)> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 || ho == 0 || wo == 0 {
        return Err(Error::dim("resize", format!("{s} -> {ho}x{wo}")));
    }
    let table = ResizeTable {
        rows: AxisTaps::half_pixel(s.h, ho),
        cols: AxisTaps::half_pixel(s.w, wo),
    };
    let out_shape = Shape::new(s.n, s.c, ho, wo);
    let xd = x.data();
    let mut out = vec![T::zero(); out_shape.len()];
    let t = &table;
    exec.for_each_chunk(&mut out, ho * wo, |idx, dst| {
        let src = &xd[idx * s.plane()..][..s.plane()];
        for y in 0..ho {
            let r0 = &src[t.rows.lo[y] * s.w..][..s.w];
            let r1 = &src[t.rows.hi[y] * s.w..][..s.w];
            let fy = t.rows.frac[y];
            for xo in 0..wo {
                let (c0, c1, fx) = (t.cols.lo[xo], t.cols.hi[xo], t.cols.frac[xo]);
                let top = r0[c0] + fx * (r0[c1] - r0[c0]);
                let bottom = r1[c0] + fx * (r1[c1] - r1[c0]);
                dst[y * wo + xo] = top + fy * (bottom - top);
            }
        }
    });
    Ok((Tensor::from_vec(out_shape, out), table))
}

pub fn resize_bilinear_backward<T: Scalar>(
    dout: &Tensor<T>,
    table: &ResizeTable<T>,
    x_shape: Shape,
    exec: Execution,
) -> Tensor<T> {
    let ds = dout.shape();
    let (ho, wo) = (ds.h, ds.w);
    let dd = dout.data();
    let mut dx = vec![T::zero(); x_shape.len()];
    exec.for_each_chunk(&mut dx, x_shape.plane(), |idx, dst| {
        let g = &dd[idx * ho * wo..][..ho * wo];
        for y in 0..ho {
            let (r0, r1, fy) = (table.rows.lo[y], table.rows.hi[y], table.rows.frac[y]);
            for xo in 0..wo {
                let (c0, c1, fx) = (table.cols.lo[xo], table.cols.hi[xo], table.cols.frac[xo]);
                let gv = g[y * wo + xo];
                let top = gv * (T::one() - fy);
                let bottom = gv * fy;
                dst[r0 * x_shape.w + c0] += top * (T::one() - fx);
                dst[r0 * x_shape.w + c1] += top * fx;
                dst[r1 * x_shape.w + c0] += bottom * (T::one() - fx);
                dst[r1 * x_shape.w + c1] += bottom * fx;
            }
        }
    });
    Tensor::from_vec(x_shape, dx)
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn resize_nearest<T: Scalar>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let s = x.shape();
    let pick = |d: usize, input: usize, output: usize| {
        (((d as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    let ys: Vec<usize> = (0..ho).map(|y| pick(y, s.h, ho)).collect();
    let xs: Vec<usize> = (0..wo).map(|x| pick(x, s.w, wo)).collect();
    Tensor::from_fn(Shape::new(s.n, s.c, ho, wo), |i, j, y, xo| x.get(i, j, ys[y], xs[xo]))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(dout: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = dout
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Uses the saved output: `σ' = σ(1 − σ)`.
pub fn sigmoid_backward<T: Scalar>(dout: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dout
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &s)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// State saved by batch normalisation for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Per-channel batch statistics (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    exec: Execution,
) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let p = s.plane();
    let xd = x.data();
    let mut xh = vec![T::zero(); s.len()];
    let mut out = vec![T::zero(); s.len()];
    exec.for_each_chunk(&mut xh, p, |idx, dst| {
        let j = idx % s.c;
        for (d, &v) in dst.iter_mut().zip(&xd[idx * p..(idx + 1) * p]) {
            *d = (v - mean[j]) * inv_std[j];
        }
    });
    exec.for_each_chunk(&mut out, p, |idx, dst| {
        let j = idx % s.c;
        for (d, &v) in dst.iter_mut().zip(&xh[idx * p..(idx + 1) * p]) {
            *d = gamma[j] * v + beta[j];
        }
    });
    (Tensor::from_vec(s, xh), Tensor::from_vec(s, out))
}

fn check_bn<T>(x: Shape, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != x.c || beta.len() != x.c {
        return Err(Error::dim(
            "batch_norm",
            format!("{} channels, gamma {}, beta {}", x.c, gamma.len(), beta.len()),
        ));
    }
    Ok(())
}

/// Train-mode normalisation with batch statistics over (n, h, w).
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
    exec: Execution,
) -> Result<(Tensor<T>, BatchNormSaved<T>, BatchStats<T>)> {
    let s = x.shape();
    check_bn(s, gamma, beta)?;
    let count = s.n * s.plane();
    if count == 0 {
        return Err(Error::dim("batch_norm", format!("empty input {s}")));
    }
    let inv_count = T::one() / T::cast(count as f64);
    let stats: Vec<(T, T)> = exec.map(s.c, |j| {
        let mut sum = T::zero();
        for i in 0..s.n {
            sum += x.plane(i, j).iter().fold(T::zero(), |a, &v| a + v);
        }
        let mean = sum * inv_count;
        let mut sq = T::zero();
        for i in 0..s.n {
            sq += x.plane(i, j).iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
        }
        (mean, sq * inv_count)
    });
    let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let var: Vec<T> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (xhat, y) = bn_apply(x, &mean, &inv_std, gamma, beta, exec);
    Ok((
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            train: true,
        },
        BatchStats { mean, var },
    ))
}

/// Eval-mode normalisation with running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
    eps: T,
    exec: Execution,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let s = x.shape();
    check_bn(s, gamma, beta)?;
    let (mean, var) = running.ok_or(Error::UninitializedStats)?;
    if mean.len() != s.c || var.len() != s.c {
        return Err(Error::dim("batch_norm", "running statistics length"));
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (xhat, y) = bn_apply(x, mean, &inv_std, gamma, beta, exec);
    Ok((
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            train: false,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &[T],
    saved: &BatchNormSaved<T>,
    exec: Execution,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let p = s.plane();
    let sums: Vec<(T, T)> = exec.map(s.c, |j| {
        let mut sdy = T::zero();
        let mut sdyx = T::zero();
        for i in 0..s.n {
            let g = dy.plane(i, j);
            let xh = saved.xhat.plane(i, j);
            sdy += g.iter().fold(T::zero(), |a, &v| a + v);
            sdyx += dot(g, xh);
        }
        (sdy, sdyx)
    });
    let count = T::cast((s.n * p) as f64);
    let dyd = dy.data();
    let xhd = saved.xhat.data();
    let mut dx = vec![T::zero(); s.len()];
    exec.for_each_chunk(&mut dx, p, |idx, dst| {
        let j = idx % s.c;
        let g = &dyd[idx * p..(idx + 1) * p];
        let xh = &xhd[idx * p..(idx + 1) * p];
        let k = gamma[j] * saved.inv_std[j];
        if saved.train {
            let (sdy, sdyx) = sums[j];
            let scale = k / count;
            for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xh) {
                *d = scale * (count * gv - sdy - xv * sdyx);
            }
        } else {
            for (d, &gv) in dst.iter_mut().zip(g) {
                *d = k * gv;
            }
        }
    });
    let dgamma = Tensor::vector(sums.iter().map(|s| s.1).collect());
    let dbeta = Tensor::vector(sums.iter().map(|s| s.0).collect());
    (Tensor::from_vec(s, dx), dgamma, dbeta)
}

/// How the second operand of an elementwise op maps onto the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// (n, c, 1, 1): one value per channel.
    PerChannel,
    /// (n, 1, h, w): one value per position.
    PerPosition,
}

impl Broadcast {
    pub fn resolve(a: Shape, b: Shape) -> Result<Self> {
        if a == b {
            Ok(Broadcast::Same)
        } else if b == Shape::new(a.n, a.c, 1, 1) {
            Ok(Broadcast::PerChannel)
        } else if b == Shape::new(a.n, 1, a.h, a.w) {
            Ok(Broadcast::PerPosition)
        } else {
            Err(Error::dim("elementwise", format!("cannot broadcast {b} onto {a}")))
        }
    }

    #[inline]
    fn index(self, a: Shape, k: usize) -> usize {
        match self {
            Broadcast::Same => k,
            Broadcast::PerChannel => k / a.plane(),
            Broadcast::PerPosition => {
                let p = a.plane();
                (k / (a.c * p)) * p + k % p
            }
        }
    }

    /// Sums a full-shape gradient down to the broadcast operand's shape.
    pub fn reduce<T: Scalar>(self, a: Shape, b: Shape, full: &[T]) -> Tensor<T> {
        if self == Broadcast::Same {
            return Tensor::from_vec(b, full.to_vec());
        }
        let mut out = vec![T::zero(); b.len()];
        for (k, &v) in full.iter().enumerate() {
            out[self.index(a, k)] += v;
        }
        Tensor::from_vec(b, out)
    }
}

pub fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, bc: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let s = a.shape();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| f(v, bd[bc.index(s, k)]))
        .collect();
    Tensor::from_vec(s, data)
}

/// Channel-wise concatenation.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::dim("concat", "no tensors"))?
        .shape();
    let mut c = 0;
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::dim(
                "concat",
                format!("spatial/batch mismatch: {s} vs {first}"),
            ));
        }
        c += s.c;
    }
    let out_shape = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.len());
    let per = first.plane();
    for i in 0..first.n {
        for t in xs {
            let cs = t.shape().c;
            data.extend_from_slice(&t.data()[i * cs * per..(i + 1) * cs * per]);
        }
    }
    Ok(Tensor::from_vec(out_shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn out_extent_formula() {
        let g = ConvGeometry::new(1, 9, 9);
        assert_eq!(g.out_extent(64, 3), Some(64));
        assert_eq!(ConvGeometry::new(2, 3, 1).out_extent(64, 7), Some(32));
        assert_eq!(ConvGeometry::new(1, 0, 1).out_extent(2, 3), None);
    }

    #[test]
    fn conv_all_ones_center_and_corner() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3));
        let w = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3));
        let y = conv2d_forward(&x, &w, None, ConvGeometry::new(1, 1, 1), Execution::Sequential).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 9.0);
        assert_eq!(y.get(0, 0, 0, 0), 4.0);
        assert_eq!(y.get(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn dilated_conv_single_output() {
        let x = Tensor::<f64>::ones(Shape::new(1, 1, 5, 5));
        let w = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3));
        let y = conv2d_forward(&x, &w, None, ConvGeometry::new(1, 0, 2), Execution::Sequential).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let e = conv2d_forward(&x, &w, None, ConvGeometry::default(), Execution::Sequential).unwrap_err();
        assert!(e.to_string().contains("channels"));
        let w = Tensor::<f32>::zeros(Shape::new(1, 2, 5, 5));
        let e = conv2d_forward(&x, &w, None, ConvGeometry::default(), Execution::Sequential).unwrap_err();
        assert!(e.to_string().contains("non-positive"));
    }

    #[test]
    fn max_pool_cases() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = max_pool_forward(&x, PoolGeometry::square(2), Execution::Sequential).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let c = Tensor::<f64>::full(Shape::new(1, 2, 8, 8), 2.5);
        let (y, arg) = max_pool_forward(&c, PoolGeometry::square(2), Execution::Sequential).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 4, 4));
        assert!(y.data().iter().all(|&v| v == 2.5));
        // ties route to the first element of each window
        assert_eq!(arg[0], 0);
        assert_eq!(arg[1], 2);
        assert!(max_pool_forward(&x, PoolGeometry::square(3), Execution::Sequential).is_err());
    }

    #[test]
    fn padded_max_pool_halves() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| (y * 8 + x) as f64);
        let (y, _) = max_pool_forward(&x, PoolGeometry::new(3, 2, 1), Execution::Sequential).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(y.get(0, 0, 0, 0), 9.0);
    }

    #[test]
    fn global_and_channel_pools() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_pool_forward(&x, PoolMode::Avg).unwrap().0.data(), &[2.5]);
        assert_eq!(global_pool_forward(&x, PoolMode::Max).unwrap().0.data(), &[4.0]);
        let two = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), |_, j, _, _| if j == 0 { 1.0 } else { 3.0 });
        let (avg, _) = channel_reduce_forward(&two, PoolMode::Avg).unwrap();
        assert!(avg.data().iter().all(|&v| v == 2.0));
        let (mx, _) = channel_reduce_forward(&two, PoolMode::Max).unwrap();
        assert!(mx.data().iter().all(|&v| v == 3.0));
        let (id, _) = channel_reduce_forward(&x, PoolMode::Avg).unwrap();
        assert_eq!(id.data(), x.data());
    }

    #[test]
    fn upsample_half_pixel_value() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let (y, _) = resize_bilinear_forward(&x, 4, 4, Execution::Sequential).unwrap();
        // row 0 maps to source row 0 after clamping; column 1 maps to 0.25
        assert_eq!(y.get(0, 0, 0, 1), 1.25);
        assert_eq!(y.get(0, 0, 0, 0), 1.0);
        assert_eq!(y.get(0, 0, 3, 3), 4.0);
    }

    #[test]
    fn bn_two_values() {
        let x = t(Shape::new(1, 1, 1, 2), &[1.0, 3.0]);
        let (y, _, st) = batch_norm_train(&x, &[1.0], &[0.0], 1e-12, Execution::Sequential).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        assert_eq!(st.mean, vec![2.0]);
        assert_eq!(st.var, vec![1.0]);
    }

    #[test]
    fn bn_eval_without_stats_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let e = batch_norm_eval(&x, &[1.0], &[0.0], None, 1e-5, Execution::Sequential).unwrap_err();
        assert!(matches!(e, Error::UninitializedStats));
    }

    #[test]
    fn bn_affine_on_zero_field() {
        let x = Tensor::<f32>::zeros(Shape::new(2, 1, 3, 3));
        let (y, _, _) = batch_norm_train(&x, &[2.0], &[5.0], 1e-5, Execution::Sequential).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn broadcast_rules() {
        let a = Shape::new(2, 3, 4, 5);
        assert_eq!(Broadcast::resolve(a, a).unwrap(), Broadcast::Same);
        assert_eq!(Broadcast::resolve(a, Shape::new(2, 3, 1, 1)).unwrap(), Broadcast::PerChannel);
        assert_eq!(Broadcast::resolve(a, Shape::new(2, 1, 4, 5)).unwrap(), Broadcast::PerPosition);
        assert!(Broadcast::resolve(a, Shape::new(1, 3, 1, 1)).is_err());
    }

    #[test]
    fn mul_example() {
        let a = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]);
        let b = t(Shape::new(1, 1, 1, 2), &[3.0, 4.0]);
        assert_eq!(elementwise(&a, &b, Broadcast::Same, |x, y| x * y).data(), &[3.0, 8.0]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 2));
        assert!(concat_channels(&[&a, &b]).is_err());
        let c = Tensor::<f32>::zeros(Shape::new(1, 5, 2, 2));
        let d = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        assert_eq!(concat_channels(&[&d, &c]).unwrap().shape().c, 8);
    }
}
