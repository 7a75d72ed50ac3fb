//! Dense and channel-sparse convolution layers.
//!
//! Weights are stored compactly: output row `o` owns one kH×kW kernel per
//! connected input channel (its *slots*), in ascending input order. Inactive
//! connections have no storage at all. For a full mask this layout coincides
//! with the dense `(out, in, kH, kW)` kernel stack.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::connectivity::ConnectivityMask;
use crate::error::{Error, Result};
use crate::tensor::{
    col2im, col2im_channel, gemm, im2col, BatchNorm, ConvGeometry, KernelStack, Operand, Padding,
    Scalar, Tensor4,
};

use super::param::Param;

/// Above this mask density `KernelPath::Auto` runs the masked dense GEMM,
/// which is faster there on one core.
pub const AUTO_DENSE_DENSITY: f64 = 0.25;

/// `y += a·x`.
#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d = *d + a * v;
    }
}

/// Dot product with 16 independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const L: usize = 16;
    let mut acc = [T::zero(); L];
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..L {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Which convolution kernel a layer runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelPath {
    /// Dense GEMM at or above [`AUTO_DENSE_DENSITY`], channel-sparse below.
    #[default]
    Auto,
    /// One GEMM over all channels; inactive kernels are expanded as zeros.
    Dense,
    /// Per-input-channel GEMMs over connected outputs only.
    Sparse,
}

/// How weights for newly activated connections are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewConnectionInit {
    #[default]
    Fresh,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer<T> {
    pub state: BatchNorm<T>,
    pub gamma_grad: Vec<T>,
    pub beta_grad: Vec<T>,
    pub gamma_velocity: Vec<T>,
    pub beta_velocity: Vec<T>,
}

impl<T: Scalar> BnLayer<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            state: BatchNorm::new(channels, 1e-5, 0.1)?,
            gamma_grad: vec![T::zero(); channels],
            beta_grad: vec![T::zero(); channels],
            gamma_velocity: vec![T::zero(); channels],
            beta_velocity: vec![T::zero(); channels],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    mask: ConnectivityMask,
    slots: Vec<Vec<usize>>,
    /// Kernel index of each row's first slot; length `n_out + 1`.
    offsets: Vec<usize>,
    /// Per input channel: `(output, kernel index)` of every connection.
    by_input: Vec<Vec<(usize, usize)>>,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub bn: Option<BnLayer<T>>,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
    pub path: KernelPath,
}

/// Gradients of one convolution (weights in compact slot order).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn he_std(kernel_len: usize, fan_in: usize) -> f64 {
    (2.0 / (kernel_len * fan_in.max(1)) as f64).sqrt()
}

impl<T: Scalar> ConvLayer<T> {
    /// Zero-weight layer over `mask`.
    pub fn zeros(
        mask: ConnectivityMask,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
        batch_norm: bool,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(Error::DimMismatch {
                axis: "kernel size",
                expected: 1,
                actual: 0,
            });
        }
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        let n_out = mask.n_out();
        let mut layer = ConvLayer {
            mask,
            slots: Vec::new(),
            offsets: Vec::new(),
            by_input: Vec::new(),
            weight: Param::zeros(0),
            bias: Param::zeros(n_out),
            bn: if batch_norm {
                Some(BnLayer::new(n_out)?)
            } else {
                None
            },
            kh,
            kw,
            stride,
            padding,
            path: KernelPath::Auto,
        };
        layer.rebuild_index();
        layer.weight = Param::zeros(layer.offsets[n_out] * layer.kernel_len());
        Ok(layer)
    }

    /// He-normal initialization using each row's active fan-in.
    pub fn init<R: Rng + ?Sized>(
        mask: ConnectivityMask,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(mask, kh, kw, stride, padding, batch_norm)?;
        let kk = layer.kernel_len();
        for o in 0..layer.n_out() {
            let fan = layer.slots[o].len();
            let normal = Normal::new(0.0, he_std(kk, fan)).expect("finite std");
            let (a, b) = (layer.offsets[o] * kk, layer.offsets[o + 1] * kk);
            for w in &mut layer.weight.value[a..b] {
                *w = T::lit(normal.sample(rng));
            }
        }
        Ok(layer)
    }

    fn rebuild_index(&mut self) {
        let n_out = self.mask.n_out();
        self.slots = (0..n_out).map(|o| self.mask.row_inputs(o)).collect();
        self.offsets = Vec::with_capacity(n_out + 1);
        let mut acc = 0;
        self.offsets.push(0);
        for s in &self.slots {
            acc += s.len();
            self.offsets.push(acc);
        }
        self.by_input = vec![Vec::new(); self.mask.n_in()];
        for (o, row) in self.slots.iter().enumerate() {
            for (s, &i) in row.iter().enumerate() {
                self.by_input[i].push((o, self.offsets[o] + s));
            }
        }
    }

    pub fn mask(&self) -> &ConnectivityMask {
        &self.mask
    }

    /// Connected input channels of each output, ascending.
    pub fn slots(&self) -> &[Vec<usize>] {
        &self.slots
    }

    pub fn n_in(&self) -> usize {
        self.mask.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.mask.n_out()
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn kernel_len(&self) -> usize {
        self.kh * self.kw
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn active_connections(&self) -> usize {
        self.offsets[self.n_out()]
    }

    /// Kernel for output `o` and its `s`-th slot.
    pub fn kernel(&self, o: usize, s: usize) -> &[T] {
        let kk = self.kernel_len();
        let q = self.offsets[o] + s;
        &self.weight.value[q * kk..(q + 1) * kk]
    }

    pub fn kernel_mut(&mut self, o: usize, s: usize) -> &mut [T] {
        let kk = self.kernel_len();
        let q = self.offsets[o] + s;
        &mut self.weight.value[q * kk..(q + 1) * kk]
    }

    /// Kernel index range of row `o` within the compact weight array.
    pub fn row_range(&self, o: usize) -> std::ops::Range<usize> {
        let kk = self.kernel_len();
        self.offsets[o] * kk..self.offsets[o + 1] * kk
    }

    /// Checks slot lists against the mask and the weight storage size.
    pub fn check_consistency(&self) -> Result<()> {
        for (o, row) in self.slots.iter().enumerate() {
            if let Some(&bad) = row.iter().find(|&&i| i >= self.n_in()) {
                return Err(Error::SlotOutOfRange {
                    channel: bad,
                    n_in: self.n_in(),
                });
            }
            if *row != self.mask.row_inputs(o) {
                return Err(Error::Config(format!(
                    "slot list of output {o} disagrees with its mask row"
                )));
            }
        }
        let expected = self.active_connections() * self.kernel_len();
        if self.weight.value.len() != expected {
            return Err(Error::DimMismatch {
                axis: "compact weights",
                expected,
                actual: self.weight.value.len(),
            });
        }
        Ok(())
    }

    /// Dense `(out, in, kH, kW)` kernels with zeros at inactive connections.
    pub fn dense_kernels(&self) -> KernelStack<T> {
        let mut k = KernelStack::zeros([self.n_out(), self.n_in(), self.kh, self.kw])
            .expect("layer dims are non-zero");
        for o in 0..self.n_out() {
            for (s, &i) in self.slots[o].iter().enumerate() {
                k.kernel_mut(o, i).copy_from_slice(self.kernel(o, s));
            }
        }
        k
    }

    /// Replaces the weights from a dense kernel stack; inactive kernels are dropped.
    pub fn set_dense_kernels(&mut self, k: &KernelStack<T>) -> Result<()> {
        if k.dims() != [self.n_out(), self.n_in(), self.kh, self.kw] {
            return Err(Error::DimMismatch {
                axis: "kernel stack",
                expected: self.n_out() * self.n_in() * self.kernel_len(),
                actual: k.data().len(),
            });
        }
        for o in 0..self.n_out() {
            for s in 0..self.slots[o].len() {
                let i = self.slots[o][s];
                self.kernel_mut(o, s).copy_from_slice(k.kernel(o, i));
            }
        }
        Ok(())
    }

    /// Gathers compact entries of a dense `(out, in·kk)` gradient.
    fn compact_from_dense(&self, dense: &[T]) -> Vec<T> {
        let kk = self.kernel_len();
        let row_len = self.n_in() * kk;
        let mut out = Vec::with_capacity(self.weight.value.len());
        for (o, row) in self.slots.iter().enumerate() {
            for &i in row {
                let start = o * row_len + i * kk;
                out.extend_from_slice(&dense[start..start + kk]);
            }
        }
        out
    }

    pub fn geometry(&self, in_h: usize, in_w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(in_h, in_w, self.kh, self.kw, self.stride, self.padding)
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        if input.channels() != self.n_in() {
            return Err(Error::DimMismatch {
                axis: "input channels",
                expected: self.n_in(),
                actual: input.channels(),
            });
        }
        Ok(())
    }

    pub(crate) fn resolved_path(&self) -> KernelPath {
        match self.path {
            KernelPath::Auto if self.mask.density() >= AUTO_DENSE_DENSITY => KernelPath::Dense,
            KernelPath::Auto => KernelPath::Sparse,
            p => p,
        }
    }

    /// Convolution plus bias from a precomputed im2col matrix.
    pub(crate) fn forward_cols(
        &self,
        cols: &[T],
        g: &ConvGeometry,
        batch: usize,
        path: KernelPath,
    ) -> Tensor4<T> {
        let kk = self.kernel_len();
        let npix = batch * g.out_len();
        let n_out = self.n_out();
        let mut mat = vec![T::zero(); n_out * npix];
        match path {
            KernelPath::Sparse => {
                // Alg. 2 grouped by input channel: one GEMM per input over the
                // outputs it feeds, scattered into their rows.
                let mut wi = Vec::new();
                let mut tmp = Vec::new();
                for (i, conns) in self.by_input.iter().enumerate() {
                    if conns.is_empty() {
                        continue;
                    }
                    let m = conns.len();
                    wi.clear();
                    for &(_, q) in conns {
                        wi.extend_from_slice(&self.weight.value[q * kk..(q + 1) * kk]);
                    }
                    tmp.resize(m * npix, T::zero());
                    let ci = &cols[i * kk * npix..(i + 1) * kk * npix];
                    gemm(
                        m,
                        kk,
                        npix,
                        Operand::n(&wi),
                        Operand::n(ci),
                        &mut tmp,
                        false,
                    );
                    for (r, &(o, _)) in conns.iter().enumerate() {
                        axpy(
                            T::one(),
                            &tmp[r * npix..(r + 1) * npix],
                            &mut mat[o * npix..(o + 1) * npix],
                        );
                    }
                }
            }
            _ => {
                let expanded;
                let w: &[T] = if self.mask.is_full() {
                    &self.weight.value
                } else {
                    expanded = self.dense_kernels();
                    expanded.data()
                };
                gemm(
                    n_out,
                    self.n_in() * kk,
                    npix,
                    Operand::n(w),
                    Operand::n(cols),
                    &mut mat,
                    false,
                );
            }
        }
        let plane = g.out_len();
        let mut out = Tensor4::zeros([batch, n_out, g.out_h, g.out_w]);
        for o in 0..n_out {
            let b = self.bias.value[o];
            for n in 0..batch {
                let src = &mat[o * npix + n * plane..o * npix + (n + 1) * plane];
                for (d, &v) in out.plane_mut(n, o).iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        out
    }

    pub(crate) fn backward_cols(
        &self,
        cols: &[T],
        g: &ConvGeometry,
        input_dims: [usize; 4],
        grad_out: &Tensor4<T>,
        path: KernelPath,
        need_input: bool,
    ) -> ConvGrads<T> {
        let kk = self.kernel_len();
        let batch = input_dims[0];
        let plane = g.out_len();
        let npix = batch * plane;
        let n_out = self.n_out();
        let n_in = self.n_in();
        let mut gmat = vec![T::zero(); n_out * npix];
        let mut db = vec![T::zero(); n_out];
        for o in 0..n_out {
            for n in 0..batch {
                let src = grad_out.plane(n, o);
                gmat[o * npix + n * plane..o * npix + (n + 1) * plane].copy_from_slice(src);
                db[o] += src.iter().copied().sum::<T>();
            }
        }
        match path {
            KernelPath::Sparse => {
                let mut dw = vec![T::zero(); self.weight.value.len()];
                let mut dx = need_input.then(|| Tensor4::zeros(input_dims));
                let (mut gi, mut wi, mut dci) = (Vec::new(), Vec::new(), Vec::new());
                for (i, conns) in self.by_input.iter().enumerate() {
                    if conns.is_empty() {
                        continue;
                    }
                    let ci = &cols[i * kk * npix..(i + 1) * kk * npix];
                    for &(o, q) in conns {
                        let go = &gmat[o * npix..(o + 1) * npix];
                        for k in 0..kk {
                            dw[q * kk + k] = dot(go, &ci[k * npix..(k + 1) * npix]);
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m = conns.len();
                        gi.clear();
                        wi.clear();
                        for &(o, q) in conns {
                            gi.extend_from_slice(&gmat[o * npix..(o + 1) * npix]);
                            wi.extend_from_slice(&self.weight.value[q * kk..(q + 1) * kk]);
                        }
                        dci.resize(kk * npix, T::zero());
                        gemm(
                            kk,
                            m,
                            npix,
                            Operand::t(&wi),
                            Operand::n(&gi),
                            &mut dci,
                            false,
                        );
                        col2im_channel(&dci, dx, i, g);
                    }
                }
                ConvGrads {
                    input: dx,
                    weights: dw,
                    bias: db,
                }
            }
            _ => {
                let full = self.mask.is_full();
                let expanded;
                let w: &[T] = if full {
                    &self.weight.value
                } else {
                    expanded = self.dense_kernels();
                    expanded.data()
                };
                let mut dwd = vec![T::zero(); n_out * n_in * kk];
                gemm(
                    n_out,
                    npix,
                    n_in * kk,
                    Operand::n(&gmat),
                    Operand::t(cols),
                    &mut dwd,
                    false,
                );
                let dw = if full {
                    dwd
                } else {
                    self.compact_from_dense(&dwd)
                };
                let dx = need_input.then(|| {
                    let mut dcols = vec![T::zero(); n_in * kk * npix];
                    gemm(
                        n_in * kk,
                        n_out,
                        npix,
                        Operand::t(w),
                        Operand::n(&gmat),
                        &mut dcols,
                        false,
                    );
                    col2im(&dcols, input_dims, g)
                });
                ConvGrads {
                    input: dx,
                    weights: dw,
                    bias: db,
                }
            }
        }
    }

    /// Activates the connections of `new_mask` (a superset of the current mask).
    /// Existing kernels keep their values and momentum bit-exactly.
    pub fn grow<R: Rng + ?Sized>(
        &mut self,
        new_mask: ConnectivityMask,
        init: NewConnectionInit,
        rng: &mut R,
    ) -> Result<()> {
        if !self.mask.is_subset_of(&new_mask) {
            return Err(Error::Config(
                "densified mask must contain the current mask".into(),
            ));
        }
        let kk = self.kernel_len();
        let old = std::mem::replace(&mut self.mask, new_mask);
        let old_slots = std::mem::take(&mut self.slots);
        let old_offsets = std::mem::take(&mut self.offsets);
        let old_weight = std::mem::replace(&mut self.weight, Param::zeros(0));
        self.rebuild_index();
        let total = self.offsets[self.n_out()] * kk;
        let mut weight = Param::zeros(total);
        for o in 0..self.n_out() {
            let fan = self.slots[o].len();
            let normal = Normal::new(0.0, he_std(kk, fan)).expect("finite std");
            let mut old_s = 0;
            for (s, &i) in self.slots[o].iter().enumerate() {
                let dst = (self.offsets[o] + s) * kk;
                if old.get(o, i) {
                    let src = (old_offsets[o] + old_s) * kk;
                    debug_assert_eq!(old_slots[o][old_s], i);
                    weight.value[dst..dst + kk].copy_from_slice(&old_weight.value[src..src + kk]);
                    weight.velocity[dst..dst + kk]
                        .copy_from_slice(&old_weight.velocity[src..src + kk]);
                    old_s += 1;
                } else if init == NewConnectionInit::Fresh {
                    for w in &mut weight.value[dst..dst + kk] {
                        *w = T::lit(normal.sample(rng));
                    }
                }
            }
        }
        self.weight = weight;
        Ok(())
    }

    /// Rebuilds the layer over a permuted mask; used by channel permutation.
    pub(crate) fn from_parts(
        mask: ConnectivityMask,
        template: &ConvLayer<T>,
        weights: Vec<T>,
        bias: Vec<T>,
        bn: Option<BnLayer<T>>,
    ) -> Result<Self> {
        let mut layer = Self::zeros(
            mask,
            template.kh,
            template.kw,
            template.stride,
            template.padding,
            false,
        )?;
        if weights.len() != layer.weight.value.len() {
            return Err(Error::DimMismatch {
                axis: "compact weights",
                expected: layer.weight.value.len(),
                actual: weights.len(),
            });
        }
        layer.weight = Param::from_value(weights);
        layer.bias = Param::from_value(bias);
        layer.bn = bn;
        layer.path = template.path;
        Ok(layer)
    }
}

fn prepare<T: Scalar>(input: &Tensor4<T>, layer: &ConvLayer<T>) -> Result<(ConvGeometry, Vec<T>)> {
    layer.check_input(input)?;
    layer.check_consistency()?;
    let g = layer.geometry(input.height(), input.width())?;
    let cols = im2col(input, &g);
    Ok((g, cols))
}

/// Every input channel convolved with every output's kernel, plus bias.
/// Inactive connections contribute zero kernels.
pub fn dense_conv_forward<T: Scalar>(
    input: &Tensor4<T>,
    layer: &ConvLayer<T>,
) -> Result<Tensor4<T>> {
    let (g, cols) = prepare(input, layer)?;
    Ok(layer.forward_cols(&cols, &g, input.batch(), KernelPath::Dense))
}

/// Only connected input channels are convolved into each output, plus bias.
pub fn sparse_conv_forward<T: Scalar>(
    input: &Tensor4<T>,
    layer: &ConvLayer<T>,
) -> Result<Tensor4<T>> {
    let (g, cols) = prepare(input, layer)?;
    Ok(layer.forward_cols(&cols, &g, input.batch(), KernelPath::Sparse))
}

fn check_grad_out<T: Scalar>(grad_out: &Tensor4<T>, expected: [usize; 4]) -> Result<()> {
    if grad_out.dims() != expected {
        return Err(Error::DimMismatch {
            axis: "output gradient",
            expected: expected.iter().product(),
            actual: grad_out.data().len(),
        });
    }
    Ok(())
}

pub fn sparse_conv_backward<T: Scalar>(
    input: &Tensor4<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (g, cols) = prepare(input, layer)?;
    check_grad_out(grad_out, [input.batch(), layer.n_out(), g.out_h, g.out_w])?;
    Ok(layer.backward_cols(&cols, &g, input.dims(), grad_out, KernelPath::Sparse, true))
}

pub fn dense_conv_backward<T: Scalar>(
    input: &Tensor4<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let (g, cols) = prepare(input, layer)?;
    check_grad_out(grad_out, [input.batch(), layer.n_out(), g.out_h, g.out_w])?;
    Ok(layer.backward_cols(&cols, &g, input.dims(), grad_out, KernelPath::Dense, true))
}
