//! Dense storage and the numerical primitives every layer is assembled from.
//!
//! Activations live in [`Tensor4`] with (N, C, H, W) row-major layout, so one
//! channel's spatial plane is a contiguous slice. Convolution over a batch is
//! lowered to im2col + GEMM; the plain per-plane [`plane_convolve`] is the
//! reference form.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c ← alpha·op(a)·op(b) + beta·c` over raw strided storage.
    ///
    /// # Safety
    /// Strides and dimensions must describe regions inside the given buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix operand for [`gemm`]. `transposed` means the buffer holds
/// the transpose of the logical operand.
#[derive(Clone, Copy)]
pub struct Operand<'a, T> {
    pub data: &'a [T],
    pub transposed: bool,
}

impl<'a, T> Operand<'a, T> {
    pub fn n(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: true,
        }
    }
}

/// `c (m×n) ← a (m×k) · b (k×n) [+ c]`, all contiguous row-major.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.data.len() >= m * k, "gemm: lhs too short");
    assert!(b.data.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a.transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b.transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the length asserts above bound every access made with these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense (batch, channel, height, width) array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::DimMismatch {
                axis: "data length",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn item_len(&self) -> usize {
        self.dims[1] * self.plane_len()
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

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Reinterprets the same data with new dims of equal volume.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(
            T::zero(),
            |acc, v| if v.abs() > acc { v.abs() } else { acc },
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Convolution weights laid out (out_channels, in_slots, kH, kW).
///
/// For a channel-sparse layer `in_slots` is the number of connected input
/// channels rather than the full input depth.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelStack<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> KernelStack<T> {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        Self::from_vec(dims, vec![T::zero(); dims.iter().product()])
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        const AXES: [&str; 4] = ["out_channels", "in_slots", "kernel height", "kernel width"];
        for (axis, &d) in AXES.iter().zip(dims.iter()) {
            if d == 0 {
                return Err(Error::DimMismatch {
                    axis,
                    expected: 1,
                    actual: 0,
                });
            }
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::DimMismatch {
                axis: "data length",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The kH×kW kernel connecting slot `s` to output `o`.
    pub fn kernel(&self, o: usize, s: usize) -> &[T] {
        let kk = self.dims[2] * self.dims[3];
        let start = (o * self.dims[1] + s) * kk;
        &self.data[start..start + kk]
    }

    pub fn kernel_mut(&mut self, o: usize, s: usize) -> &mut [T] {
        let kk = self.dims[2] * self.dims[3];
        let start = (o * self.dims[1] + s) * kk;
        &mut self.data[start..start + kk]
    }
}

/// Row-major 2-D array; doubles as a single image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                axis: "data length",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output size and leading padding along one spatial axis.
///
/// SAME splits odd total padding with the extra row/column at the end.
pub fn conv_output_dim(
    axis: &'static str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    if kernel == 0 {
        return Err(Error::DimMismatch {
            axis,
            expected: 1,
            actual: 0,
        });
    }
    match padding {
        Padding::Valid => {
            if input < kernel {
                return Err(Error::DimMismatch {
                    axis,
                    expected: kernel,
                    actual: input,
                });
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            if input == 0 {
                return Err(Error::DimMismatch {
                    axis,
                    expected: 1,
                    actual: 0,
                });
            }
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

/// Spatial bookkeeping shared by a convolution's forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (out_h, pad_top) = conv_output_dim("height", in_h, kh, stride, padding)?;
        let (out_w, pad_left) = conv_output_dim("width", in_w, kw, stride, padding)?;
        Ok(Self {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn kernel_len(&self) -> usize {
        self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate hit by output `o` at kernel offset `k`, if inside.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Cross-correlates one plane with one kernel (no kernel flip, as in CNNs).
pub fn plane_convolve<T: Scalar>(
    input: &Matrix<T>,
    kernel: &Matrix<T>,
    stride: usize,
    padding: Padding,
) -> Result<Matrix<T>> {
    if input.data.len() != input.rows * input.cols {
        return Err(Error::DimMismatch {
            axis: "input data length",
            expected: input.rows * input.cols,
            actual: input.data.len(),
        });
    }
    if kernel.data.len() != kernel.rows * kernel.cols {
        return Err(Error::DimMismatch {
            axis: "kernel data length",
            expected: kernel.rows * kernel.cols,
            actual: kernel.data.len(),
        });
    }
    let g = ConvGeometry::new(
        input.rows,
        input.cols,
        kernel.rows,
        kernel.cols,
        stride,
        padding,
    )?;
    let mut out = Matrix::zeros(g.out_h, g.out_w);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let mut acc = T::zero();
            for ky in 0..g.kh {
                let Some(iy) = ConvGeometry::source(oy, ky, stride, g.pad_top, g.in_h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    if let Some(ix) = ConvGeometry::source(ox, kx, stride, g.pad_left, g.in_w) {
                        acc += input.data[iy * g.in_w + ix] * kernel.data[ky * g.kw + kx];
                    }
                }
            }
            out.data[oy * g.out_w + ox] = acc;
        }
    }
    Ok(out)
}

/// Unfolds a batch into a `(C·kH·kW) × (N·oH·oW)` matrix.
///
/// Rows for input channel `c` occupy `c·kH·kW .. (c+1)·kH·kW`, so a single
/// channel's patch matrix is one contiguous block.
pub fn im2col<T: Scalar>(x: &Tensor4<T>, g: &ConvGeometry) -> Vec<T> {
    let [n, c, h, w] = x.dims();
    debug_assert_eq!((h, w), (g.in_h, g.in_w));
    let cols = n * g.out_len();
    let mut out = vec![T::zero(); c * g.kernel_len() * cols];
    for ch in 0..c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = x.plane(b, ch);
                    let dst = &mut dst_row[b * g.out_len()..(b + 1) * g.out_len()];
                    for oy in 0..g.out_h {
                        let Some(iy) = ConvGeometry::source(oy, ky, g.stride, g.pad_top, h) else {
                            continue;
                        };
                        let src = &plane[iy * w..(iy + 1) * w];
                        let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            // valid ox range: 0 <= ox + kx - pad < w
                            let lo = g.pad_left.saturating_sub(kx);
                            let hi = (w + g.pad_left).saturating_sub(kx).min(g.out_w);
                            if lo < hi {
                                let s0 = lo + kx - g.pad_left;
                                d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                if let Some(ix) =
                                    ConvGeometry::source(ox, kx, g.stride, g.pad_left, w)
                                {
                                    *v = src[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`] for rows `channel_rows` belonging to one input
/// channel: scatters a `(kH·kW) × (N·oH·oW)` block back into `dx`.
pub fn col2im_channel<T: Scalar>(
    block: &[T],
    dx: &mut Tensor4<T>,
    channel: usize,
    g: &ConvGeometry,
) {
    let [n, _, h, w] = dx.dims();
    let cols = n * g.out_len();
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let row = ky * g.kw + kx;
            let src_row = &block[row * cols..(row + 1) * cols];
            for b in 0..n {
                let src = &src_row[b * g.out_len()..(b + 1) * g.out_len()];
                let plane = dx.plane_mut(b, channel);
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeometry::source(oy, ky, g.stride, g.pad_top, h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let lo = g.pad_left.saturating_sub(kx);
                        let hi = (w + g.pad_left).saturating_sub(kx).min(g.out_w);
                        if lo < hi {
                            let d0 = lo + kx - g.pad_left;
                            for (d, v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&s[lo..hi]) {
                                *d += *v;
                            }
                        }
                    } else {
                        for (ox, v) in s.iter().enumerate() {
                            if let Some(ix) = ConvGeometry::source(ox, kx, g.stride, g.pad_left, w)
                            {
                                dst[ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] over every channel.
pub fn col2im<T: Scalar>(cols: &[T], dims: [usize; 4], g: &ConvGeometry) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(dims);
    let block = g.kernel_len() * dims[0] * g.out_len();
    for ch in 0..dims[1] {
        col2im_channel(&cols[ch * block..(ch + 1) * block], &mut dx, ch, g);
    }
    dx
}

/// Flat input index of each pooled maximum, used to route gradients back.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    pub input_dims: [usize; 4],
    pub argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Odd trailing rows/columns behave as if
/// padded with −∞; ties go to the first position in row-major order.
pub fn maxpool2x2<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, PoolIndices)> {
    let [n, c, h, w] = x.dims();
    if h == 0 || w == 0 {
        return Err(Error::DimMismatch {
            axis: if h == 0 { "height" } else { "width" },
            expected: 1,
            actual: 0,
        });
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            let plane = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for oy in 0..oh {
                let full_rows = 2 * oy + 1 < h;
                for ox in 0..ow {
                    let top = 2 * oy * w + 2 * ox;
                    let (best, best_idx) = if full_rows && 2 * ox + 1 < w {
                        let mut bi = top;
                        for cand in [top + 1, top + w, top + w + 1] {
                            if plane[cand] > plane[bi] {
                                bi = cand;
                            }
                        }
                        (plane[bi], bi)
                    } else {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for iy in 2 * oy..(2 * oy + 2).min(h) {
                            for ix in 2 * ox..(2 * ox + 2).min(w) {
                                let v = plane[iy * w + ix];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = iy * w + ix;
                                }
                            }
                        }
                        (best, best_idx)
                    };
                    dst[oy * ow + ox] = best;
                    argmax.push(base + best_idx);
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_dims: x.dims(),
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward<T: Scalar>(grad_out: &Tensor4<T>, idx: &PoolIndices) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(idx.input_dims);
    let data = dx.data_mut();
    for (&i, &g) in idx.argmax.iter().zip(grad_out.data()) {
        data[i] += g;
    }
    dx
}

/// `x·w + b` for `x: N×D`, `w: D×K`, `b: K`.
pub fn matmul_bias<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    if x.cols != w.rows {
        return Err(Error::DimMismatch {
            axis: "inner dimension",
            expected: w.rows,
            actual: x.cols,
        });
    }
    if b.len() != w.cols {
        return Err(Error::DimMismatch {
            axis: "bias length",
            expected: w.cols,
            actual: b.len(),
        });
    }
    let mut out = Matrix::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        out.data[r * w.cols..(r + 1) * w.cols].copy_from_slice(b);
    }
    gemm(
        x.rows,
        x.cols,
        w.cols,
        Operand::n(&x.data),
        Operand::n(&w.data),
        &mut out.data,
        true,
    );
    Ok(out)
}

/// Returns `(dx, dw, db)` for [`matmul_bias`].
pub fn matmul_bias_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Vec<T>)> {
    if dy.rows != x.rows || dy.cols != w.cols {
        return Err(Error::DimMismatch {
            axis: "output gradient",
            expected: x.rows * w.cols,
            actual: dy.rows * dy.cols,
        });
    }
    let mut dx = Matrix::zeros(x.rows, x.cols);
    gemm(
        x.rows,
        w.cols,
        x.cols,
        Operand::n(&dy.data),
        Operand::t(&w.data),
        &mut dx.data,
        false,
    );
    let mut dw = Matrix::zeros(w.rows, w.cols);
    gemm(
        x.cols,
        x.rows,
        w.cols,
        Operand::t(&x.data),
        Operand::n(&dy.data),
        &mut dw.data,
        false,
    );
    let mut db = vec![T::zero(); w.cols];
    for r in 0..dy.rows {
        for (acc, v) in db.iter_mut().zip(dy.row(r)) {
            *acc += *v;
        }
    }
    Ok((dx, dw, db))
}

/// NaN passes through so divergence stays visible downstream.
pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v < T::zero() { T::zero() } else { v })
        .collect()
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

/// Masks `dy` by the sign of the relu output (or input, equivalently).
pub fn relu_backward<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/N`.
pub fn softmax_xent<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    if labels.len() != logits.rows {
        return Err(Error::DimMismatch {
            axis: "labels",
            expected: logits.rows,
            actual: labels.len(),
        });
    }
    let k = logits.cols;
    let n = T::from_usize(logits.rows.max(1)).unwrap();
    let mut grad = Matrix::zeros(logits.rows, k);
    let mut loss = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                row: r,
                label,
                classes: k,
            });
        }
        let row = logits.row(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let g = &mut grad.data[r * k..(r + 1) * k];
        let mut z = T::zero();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            z += *gi;
        }
        loss += z.ln() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi = *gi / z / n;
        }
        g[label] -= T::one() / n;
    }
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch normalization state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    /// Weight of the current batch in the running-statistics update.
    pub momentum: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(Error::Config(format!(
                "batch norm eps must be > 0, got {eps}"
            )));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "batch norm momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(eps),
            momentum: T::lit(momentum),
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    dims: [usize; 4],
    mode: Mode,
}

pub fn batchnorm2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    bn: &mut BatchNorm<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = x.dims();
    for (axis, len) in [("gamma", bn.gamma.len()), ("beta", bn.beta.len())] {
        if len != c {
            return Err(Error::DimMismatch {
                axis,
                expected: c,
                actual: len,
            });
        }
    }
    if bn.eps <= T::zero() {
        return Err(Error::Config("batch norm eps must be > 0".into()));
    }
    let m = n * h * w;
    if mode == Mode::Train && m < 2 {
        return Err(Error::Config(format!(
            "train-mode batch norm needs N·H·W >= 2, got {m}"
        )));
    }
    let mf = T::from_usize(m).unwrap();
    let mut y = Tensor4::zeros(x.dims());
    let mut x_hat = vec![T::zero(); x.data().len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = T::zero();
                for b in 0..n {
                    sum += x.plane(b, ch).iter().copied().sum::<T>();
                }
                let mean = sum / mf;
                let mut sq = T::zero();
                for b in 0..n {
                    sq += x
                        .plane(b, ch)
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>();
                }
                let var = sq / mf;
                let unbiased = sq / T::from_usize(m - 1).unwrap();
                let mom = bn.momentum;
                bn.running_mean[ch] = (T::one() - mom) * bn.running_mean[ch] + mom * mean;
                bn.running_var[ch] = (T::one() - mom) * bn.running_var[ch] + mom * unbiased;
                (mean, var)
            }
            Mode::Eval => (bn.running_mean[ch], bn.running_var[ch]),
        };
        let istd = T::one() / (var + bn.eps).sqrt();
        inv_std[ch] = istd;
        let (gamma, beta) = (bn.gamma[ch], bn.beta[ch]);
        let p = h * w;
        for b in 0..n {
            let off = (b * c + ch) * p;
            let src = x.plane(b, ch);
            let xh = &mut x_hat[off..off + p];
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - mean) * istd;
            }
            for (o, &v) in y.plane_mut(b, ch).iter_mut().zip(xh.iter()) {
                *o = gamma * v + beta;
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std,
            dims: x.dims(),
            mode,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    dy: &Tensor4<T>,
    gamma: &[T],
    cache: &BatchNormCache<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    if dy.dims() != cache.dims {
        return Err(Error::DimMismatch {
            axis: "batch norm gradient",
            expected: cache.dims.iter().product(),
            actual: dy.data().len(),
        });
    }
    let [n, c, h, w] = cache.dims;
    let p = h * w;
    let mf = T::from_usize(n * p).unwrap();
    let mut dx = Tensor4::zeros(cache.dims);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * p;
            for (&g, &xh) in dy.plane(b, ch).iter().zip(&cache.x_hat[off..off + p]) {
                sum_dy += g;
                sum_dy_xh += g * xh;
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * p;
            let xh = &cache.x_hat[off..off + p];
            let g = dy.plane(b, ch);
            let d = dx.plane_mut(b, ch);
            match cache.mode {
                Mode::Train => {
                    let mean_dy = sum_dy / mf;
                    let mean_dy_xh = sum_dy_xh / mf;
                    for i in 0..p {
                        d[i] = scale * (g[i] - mean_dy - xh[i] * mean_dy_xh);
                    }
                }
                Mode::Eval => {
                    for i in 0..p {
                        d[i] = scale * g[i];
                    }
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_plane(
        input: &Matrix<f64>,
        k: &Matrix<f64>,
        stride: usize,
        pad: Padding,
    ) -> Matrix<f64> {
        // Six-loop direct summation over an explicitly zero-padded copy.
        let (oh, pt) = conv_output_dim("h", input.rows, k.rows, stride, pad).unwrap();
        let (ow, pl) = conv_output_dim("w", input.cols, k.cols, stride, pad).unwrap();
        let ph = (oh - 1) * stride + k.rows;
        let pw = (ow - 1) * stride + k.cols;
        let mut padded = vec![0.0; ph.max(input.rows + pt) * pw.max(input.cols + pl)];
        let pwid = pw.max(input.cols + pl);
        for r in 0..input.rows {
            for c in 0..input.cols {
                padded[(r + pt) * pwid + c + pl] = input.at(r, c);
            }
        }
        let mut out = Matrix::zeros(oh, ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k.rows {
                    for kx in 0..k.cols {
                        acc += padded[(oy * stride + ky) * pwid + ox * stride + kx] * k.at(ky, kx);
                    }
                }
                out.data[oy * ow + ox] = acc;
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random_matrix(rows: usize, cols: usize, seed: &mut u64) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| lcg(seed)).collect()).unwrap()
    }

    #[test]
    fn plane_convolve_scalar_kernel() {
        let x = Matrix::from_vec(3, 3, vec![1.0f32; 9]).unwrap();
        let k = Matrix::from_vec(1, 1, vec![2.0f32]).unwrap();
        let y = plane_convolve(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!((y.rows, y.cols), (3, 3));
        assert!(y.data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn plane_convolve_valid_dims() {
        let x = Matrix::<f32>::zeros(4, 4);
        let k = Matrix::<f32>::zeros(3, 3);
        let y = plane_convolve(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!((y.rows, y.cols), (2, 2));
    }

    #[test]
    fn plane_convolve_matches_naive_oracle() {
        let mut seed = 7;
        for (stride, pad) in [
            (1, Padding::Same),
            (1, Padding::Valid),
            (2, Padding::Same),
            (2, Padding::Valid),
        ] {
            let x = random_matrix(5, 5, &mut seed);
            let k = random_matrix(3, 3, &mut seed);
            let y = plane_convolve(&x, &k, stride, pad).unwrap();
            let o = naive_plane(&x, &k, stride, pad);
            assert_eq!((y.rows, y.cols), (o.rows, o.cols));
            for (a, b) in y.data.iter().zip(&o.data) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn plane_convolve_reports_axis() {
        let x = Matrix::<f32>::zeros(2, 5);
        let k = Matrix::<f32>::zeros(3, 3);
        match plane_convolve(&x, &k, 1, Padding::Valid) {
            Err(Error::DimMismatch { axis, .. }) => assert_eq!(axis, "height"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = Matrix {
            rows: 3,
            cols: 3,
            data: vec![0.0f32; 8],
        };
        assert!(matches!(
            plane_convolve(&bad, &k, 1, Padding::Same),
            Err(Error::DimMismatch {
                axis: "input data length",
                ..
            })
        ));
        assert!(matches!(
            plane_convolve(&Matrix::<f32>::zeros(3, 3), &k, 0, Padding::Same),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_padding_arithmetic() {
        assert_eq!(
            conv_output_dim("h", 28, 3, 1, Padding::Same).unwrap(),
            (28, 1)
        );
        assert_eq!(
            conv_output_dim("h", 28, 5, 1, Padding::Same).unwrap(),
            (28, 2)
        );
        assert_eq!(
            conv_output_dim("h", 7, 3, 2, Padding::Same).unwrap(),
            (4, 1)
        );
        assert_eq!(
            conv_output_dim("h", 8, 3, 2, Padding::Same).unwrap(),
            (4, 0)
        );
        assert_eq!(
            conv_output_dim("h", 7, 3, 2, Padding::Valid).unwrap(),
            (3, 0)
        );
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let mut seed = 3;
        for (stride, pad) in [
            (1, Padding::Same),
            (2, Padding::Same),
            (1, Padding::Valid),
            (2, Padding::Valid),
        ] {
            let dims = [2, 3, 6, 5];
            let x = Tensor4::from_vec(dims, (0..180).map(|_| lcg(&mut seed)).collect()).unwrap();
            let g = ConvGeometry::new(6, 5, 3, 2, stride, pad).unwrap();
            let cols = im2col(&x, &g);
            let y: Vec<f64> = (0..cols.len()).map(|_| lcg(&mut seed)).collect();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let back = col2im(&y, dims, &g);
            let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);

        let c = Tensor4::from_vec([1, 1, 2, 2], vec![5.0f32; 4]).unwrap();
        let (y, idx) = maxpool2x2(&c).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(idx.argmax, vec![0]);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut seed = 11;
        let x =
            Tensor4::from_vec([2, 2, 8, 8], (0..256).map(|_| lcg(&mut seed)).collect()).unwrap();
        let (y, _) = maxpool2x2(&x).unwrap();
        for b in 0..2 {
            for c in 0..2 {
                for oy in 0..4 {
                    for ox in 0..4 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x.get(b, c, 2 * oy + dy, 2 * ox + dx));
                            }
                        }
                        assert_eq!(y.get(b, c, oy, ox), m);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_odd_dims_pad_bottom_right() {
        let x = Tensor4::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let (y, _) = maxpool2x2(&x).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn maxpool_backward_routes_once() {
        let mut seed = 5;
        let x = Tensor4::from_vec([1, 2, 5, 6], (0..60).map(|_| lcg(&mut seed)).collect()).unwrap();
        let (y, idx) = maxpool2x2(&x).unwrap();
        let g = Tensor4::from_vec(
            y.dims(),
            (0..y.data().len()).map(|_| lcg(&mut seed)).collect(),
        )
        .unwrap();
        let dx = maxpool2x2_backward(&g, &idx);
        let nonzero = dx.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, g.data().len());
        let s1: f64 = g.data().iter().sum();
        let s2: f64 = dx.data().iter().sum();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn relu_clamps() {
        assert_eq!(relu(&[-1.0f32, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert!(relu(&[f64::NAN])[0].is_nan());
    }

    #[test]
    fn softmax_uniform_loss() {
        let logits = Matrix::from_vec(3, 10, vec![0.7f64; 30]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn softmax_label_out_of_range() {
        let logits = Matrix::from_vec(1, 3, vec![0.0f32; 3]).unwrap();
        assert!(matches!(
            softmax_xent(&logits, &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3,
                ..
            })
        ));
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        // two values per channel: ±1 has mean 0 and biased variance 1
        let x = Tensor4::from_vec([2, 1, 1, 2], vec![1.0f64, -1.0, -1.0, 1.0]).unwrap();
        let mut bn = BatchNorm::new(1, 1e-8, 0.1).unwrap();
        let (y, _) = batchnorm2d_forward(&x, &mut bn, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut seed = 1;
        let x = Tensor4::from_vec([2, 2, 2, 2], (0..16).map(|_| lcg(&mut seed)).collect()).unwrap();
        let mut bn = BatchNorm::new(2, 1e-5, 0.1).unwrap();
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![0.25, -3.0];
        let (y, _) = batchnorm2d_forward(&x, &mut bn, Mode::Train).unwrap();
        for b in 0..2 {
            assert!(y.plane(b, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(b, 1).iter().all(|&v| v == -3.0));
        }
    }

    #[test]
    fn batchnorm_config_errors() {
        assert!(matches!(
            BatchNorm::<f32>::new(2, 0.0, 0.1),
            Err(Error::Config(_))
        ));
        let mut bn = BatchNorm::<f32>::new(1, 1e-5, 0.1).unwrap();
        let x = Tensor4::zeros([1, 1, 1, 1]);
        assert!(matches!(
            batchnorm2d_forward(&x, &mut bn, Mode::Train),
            Err(Error::Config(_))
        ));
        assert!(batchnorm2d_forward(&x, &mut bn, Mode::Eval).is_ok());
        let x = Tensor4::zeros([2, 3, 1, 1]);
        assert!(matches!(
            batchnorm2d_forward(&x, &mut bn, Mode::Train),
            Err(Error::DimMismatch { axis: "gamma", .. })
        ));
    }

    #[test]
    fn batchnorm_zero_variance_is_finite() {
        let x = Tensor4::from_vec([4, 1, 1, 1], vec![3.0f32; 4]).unwrap();
        let mut bn = BatchNorm::new(1, 1e-5, 0.1).unwrap();
        let (y, _) = batchnorm2d_forward(&x, &mut bn, Mode::Train).unwrap();
        assert!(y.is_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, Operand::n(&a), Operand::n(&b), &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, Operand::t(&a), Operand::n(&b), &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, Operand::n(&a), Operand::t(&b), &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
