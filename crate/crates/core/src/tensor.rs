//! Dense NCHW tensors and the handful of raster kernels the networks need.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type usable by the tensor engine. Training runs in `f32`; gradient
/// checks run the same code in `f64`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Four-dimensional shape, batch × channels × height × width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one batch entry.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "buffer of {} elements cannot hold shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + y) * s.w + x] = v;
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Concatenate along the batch axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        let mut n = 0;
        for p in parts {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::Dimension(format!("cannot stack {s} with {first}")));
            }
            n += s.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    /// Batch entry `n` as its own tensor.
    pub fn select(&self, n: usize) -> Self {
        let s = self.shape;
        Self {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.sample(n).to_vec(),
        }
    }
}

/// `dst (+)= lhs · rhs` for row/column-strided matrices.
///
/// `lhs` is `m × k`, `rhs` is `k × n`, `dst` is `m × n` with unit column
/// stride and row stride `dst_rs`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: usize,
    accumulate: bool,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(dst.len() >= (m - 1) * dst_rs + n);
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                dst[r * dst_rs..r * dst_rs + n].fill(T::zero());
            }
        }
        return;
    }
    assert!(lhs.len() > (m - 1) * lhs_rs + (k - 1) * lhs_cs);
    assert!(rhs.len() > (k - 1) * rhs_rs + (n - 1) * rhs_cs);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// 3×3, stride 1, same padding.
    pub const fn same3() -> Self {
        Self::new(3, 1, 1)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Dimension(format!(
                "{h}x{w} input is smaller than a {k}x{k} kernel"
            )));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Target number of unfolded columns per tile; keeps the column buffer
/// cache-resident for wide, shallow layers.
const TILE_COLUMNS: usize = 512;

/// Output-row tiles `[start, end)` covering `oh` rows.
fn row_tiles(oh: usize, ow: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (TILE_COLUMNS / ow.max(1)).max(1);
    (0..oh).step_by(rows).map(move |r0| (r0, (r0 + rows).min(oh)))
}

/// Unfold output rows `oy0..oy1` of one `c × h × w` sample into a
/// `(c·k·k) × ((oy1-oy0)·ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, g: ConvGeometry, (oy0, oy1): (usize, usize), ow: usize, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = (oy1 - oy0) * ow;
    for ci in 0..c {
        let chan = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let out = &mut row[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &chan[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let shift = kx as isize - p as isize;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        out[..lo].fill(T::zero());
                        if hi > lo {
                            let start = (lo as isize + shift) as usize;
                            out[lo..hi].copy_from_slice(&line[start..start + (hi - lo)]);
                        }
                        out[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *o = if ix >= 0 && ix < w as isize {
                                line[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the sample.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeometry, (oy0, oy1): (usize, usize), ow: usize, dst: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = (oy1 - oy0) * ow;
    for ci in 0..c {
        let chan = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if s == 1 {
                        let shift = kx as isize - p as isize;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        if hi > lo {
                            let start = (lo as isize + shift) as usize;
                            for (d, &v) in line[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `out × in × k × k`, `bias` is `1 × out × 1 × 1`.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, g: ConvGeometry) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.c != xs.c || ws.h != g.kernel || ws.w != g.kernel {
        return Err(Error::Dimension(format!(
            "weight {ws} does not fit input {xs} with kernel {}",
            g.kernel
        )));
    }
    let (oh, ow) = g.output_size(xs.h, xs.w)?;
    let out_c = ws.n;
    let ckk = xs.c * g.kernel * g.kernel;
    let plane = oh * ow;
    let mut out = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow));
    let pointwise = g.is_pointwise();
    let mut cols = Vec::new();
    for n in 0..xs.n {
        let src = x.sample(n);
        let dst = &mut out.data[n * out_c * plane..(n + 1) * out_c * plane];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(b.data[oc]);
            }
        }
        if pointwise {
            matmul(out_c, plane, ckk, dst, plane, bias.is_some(), weight.data(), ckk, 1, src, plane, 1);
            continue;
        }
        for tile in row_tiles(oh, ow) {
            let tp = (tile.1 - tile.0) * ow;
            cols.resize(ckk * tp, T::zero());
            im2col(src, xs.c, xs.h, xs.w, g, tile, ow, &mut cols);
            let off = tile.0 * ow;
            matmul(out_c, tp, ckk, &mut dst[off..], plane, bias.is_some(), weight.data(), ckk, 1, &cols, tp, 1);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input, weight, and bias.
/// Only the requested gradients are computed.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let ws = weight.shape();
    let gs = grad_out.shape();
    let (oh, ow) = (gs.h, gs.w);
    let plane = oh * ow;
    let out_c = ws.n;
    let ckk = xs.c * g.kernel * g.kernel;
    let mut gx = want_input.then(|| Tensor::zeros(xs));
    let mut gw = want_weight.then(|| Tensor::zeros(ws));
    let mut gb = want_bias.then(|| Tensor::zeros(Shape::new(1, out_c, 1, 1)));
    let pointwise = g.is_pointwise();
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for n in 0..xs.n {
        let go = grad_out.sample(n);
        if let Some(gb) = gb.as_mut() {
            for (oc, chunk) in go.chunks(plane).enumerate() {
                gb.data[oc] += chunk.iter().copied().sum();
            }
        }
        let src = x.sample(n);
        if pointwise {
            if let Some(gw) = gw.as_mut() {
                // dW[o, j] += Σ_p go[o, p] · x[j, p]
                matmul(out_c, ckk, plane, &mut gw.data, ckk, true, go, plane, 1, src, 1, plane);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                // dx[j, p] = Σ_o W[o, j] · go[o, p]
                matmul(ckk, plane, out_c, dst, plane, false, weight.data(), 1, ckk, go, plane, 1);
            }
            continue;
        }
        for tile in row_tiles(oh, ow) {
            let tp = (tile.1 - tile.0) * ow;
            let go_tile = &go[tile.0 * ow..];
            if let Some(gw) = gw.as_mut() {
                cols.resize(ckk * tp, T::zero());
                im2col(src, xs.c, xs.h, xs.w, g, tile, ow, &mut cols);
                matmul(out_c, ckk, tp, &mut gw.data, ckk, true, go_tile, plane, 1, &cols, 1, tp);
            }
            if let Some(gx) = gx.as_mut() {
                dcols.resize(ckk * tp, T::zero());
                matmul(ckk, tp, out_c, &mut dcols, tp, false, weight.data(), 1, ckk, go_tile, plane, 1);
                let dst = &mut gx.data[n * xs.sample_len()..(n + 1) * xs.sample_len()];
                col2im(&dcols, xs.c, xs.h, xs.w, g, tile, ow, dst);
            }
        }
    }
    (gx, gw, gb)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = x.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for (src, dst) in x.data.chunks(s.plane()).zip(out.data.chunks_mut(oh * ow)) {
        for oy in 0..oh {
            let line = &src[(oy / factor) * s.w..][..s.w];
            for (ox, o) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *o = line[ox / factor];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sum each `factor × factor` block.
pub fn upsample_nearest_backward<T: Real>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = grad.shape();
    let (h, w) = (s.h / factor, s.w / factor);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for (src, dst) in grad.data.chunks(s.plane()).zip(out.data.chunks_mut(h * w)) {
        for oy in 0..s.h {
            let row = &mut dst[(oy / factor) * w..][..w];
            for (ox, &v) in src[oy * s.w..(oy + 1) * s.w].iter().enumerate() {
                row[ox / factor] += v;
            }
        }
    }
    out
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s.h / 2, s.w / 2);
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for (src, dst) in x.data.chunks(s.plane()).zip(out.data.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let a = src[2 * y * s.w + 2 * xx];
                let b = src[2 * y * s.w + 2 * xx + 1];
                let c = src[(2 * y + 1) * s.w + 2 * xx];
                let d = src[(2 * y + 1) * s.w + 2 * xx + 1];
                dst[y * w + xx] = (a + b + c + d) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(grad: &Tensor<T>, input: Shape) -> Tensor<T> {
    let gs = grad.shape();
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(input);
    for (src, dst) in grad.data.chunks(gs.plane()).zip(out.data.chunks_mut(input.plane())) {
        for y in 0..gs.h {
            for x in 0..gs.w {
                let g = src[y * gs.w + x] * quarter;
                dst[2 * y * input.w + 2 * x] = g;
                dst[2 * y * input.w + 2 * x + 1] = g;
                dst[(2 * y + 1) * input.w + 2 * x] = g;
                dst[(2 * y + 1) * input.w + 2 * x + 1] = g;
            }
        }
    }
    out
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("cannot concatenate zero tensors".into()))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::Dimension(format!(
                "cannot concatenate {s} with {first} along channels"
            )));
        }
        c += s.c;
    }
    let shape = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.sample(n));
        }
    }
    Ok(Tensor { shape, data })
}

/// Split a channel-concatenated gradient back into its parts.
pub fn split_channels<T: Real>(grad: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let s = grad.shape();
    let mut outs: Vec<Tensor<T>> = channels
        .iter()
        .map(|&c| Tensor::zeros(Shape::new(s.n, c, s.h, s.w)))
        .collect();
    for n in 0..s.n {
        let mut offset = 0;
        let src = grad.sample(n);
        for (out, &c) in outs.iter_mut().zip(channels) {
            let len = c * s.plane();
            out.data[n * len..(n + 1) * len].copy_from_slice(&src[offset..offset + len]);
            offset += len;
        }
    }
    outs
}
