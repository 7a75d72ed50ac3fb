use rand_distr::{Distribution, Normal};

use crate::connectivity::{ArchSpec, ConnectivityMask, LayerSpec, TransformSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{
    batchnorm2d_backward, batchnorm2d_forward, im2col, matmul_bias, matmul_bias_backward,
    maxpool2x2, maxpool2x2_backward, relu_backward, relu_inplace, softmax_xent, BatchNormCache,
    ConvGeometry, Matrix, Mode, PoolIndices, Scalar, Tensor4,
};

use super::conv::{ConvLayer, KernelPath};
use super::param::{Param, ParamMut};

/// Fully connected layer, `y = x·W + b`, with `W` stored `d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub d_in: usize,
    pub d_out: usize,
    pub relu: bool,
}

impl<T: Scalar> FcLayer<T> {
    fn weight_matrix(&self) -> Matrix<T> {
        Matrix {
            rows: self.d_in,
            cols: self.d_out,
            data: self.weight.value.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    MaxPool,
    Flatten,
    Fc(FcLayer<T>),
    SoftmaxXent,
}

enum Activation<T> {
    Spatial(Tensor4<T>),
    Flat(Matrix<T>),
}

enum Cache<T> {
    Conv {
        cols: Vec<T>,
        geometry: ConvGeometry,
        input_dims: [usize; 4],
        path: KernelPath,
        bn: Option<BatchNormCache<T>>,
        out: Tensor4<T>,
    },
    Pool(PoolIndices),
    Flatten([usize; 4]),
    Fc {
        input: Matrix<T>,
        out: Matrix<T>,
    },
    Loss,
}

/// A sequential network built from an [`ArchSpec`] and one mask per conv layer.
pub struct Network<T> {
    arch: ArchSpec,
    layers: Vec<Layer<T>>,
    seed: u64,
    caches: Vec<Option<Cache<T>>>,
    activation_norms: Vec<f64>,
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            seed: self.seed,
            caches: Vec::new(),
            activation_norms: Vec::new(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("arch", &self.arch)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Network<T> {
    /// Builds and initializes a network. Conv weights are He-normal over the
    /// active fan-in; biases and batch norm shifts start at zero.
    pub fn new(arch: &ArchSpec, masks: Vec<ConnectivityMask>, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        let ifaces = arch.conv_interfaces()?;
        if ifaces.len() != masks.len() {
            return Err(Error::DimMismatch {
                axis: "mask count",
                expected: ifaces.len(),
                actual: masks.len(),
            });
        }
        let mut rng = rng::stream(seed, Stream::Init);
        let mut masks = masks.into_iter();
        let mut ifaces = ifaces.into_iter();
        let classifier = arch
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Fc { .. }));
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut flat = 0;
        for (i, spec) in arch.layers.iter().enumerate() {
            let layer = match spec {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    batch_norm,
                    ..
                } => {
                    let iface = ifaces.next().expect("interfaces match conv layers");
                    let mask = masks.next().expect("mask count checked");
                    if mask.n_in() != iface.n_in || mask.n_out() != iface.n_out {
                        return Err(Error::DimMismatch {
                            axis: "mask shape",
                            expected: iface.n_in * iface.n_out,
                            actual: mask.capacity(),
                        });
                    }
                    Layer::Conv(ConvLayer::init(
                        mask,
                        *kernel_h,
                        *kernel_w,
                        *stride,
                        *padding,
                        *batch_norm,
                        &mut rng,
                    )?)
                }
                LayerSpec::MaxPool => Layer::MaxPool,
                LayerSpec::Flatten => {
                    flat = shapes[i].len();
                    Layer::Flatten
                }
                LayerSpec::Fc { out } => {
                    let is_classifier = Some(i) == classifier;
                    let gain = if is_classifier { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / flat as f64).sqrt()).expect("finite");
                    let w = (0..flat * out)
                        .map(|_| T::lit(normal.sample(&mut rng)))
                        .collect();
                    let fc = FcLayer {
                        weight: Param::from_value(w),
                        bias: Param::zeros(*out),
                        d_in: flat,
                        d_out: *out,
                        relu: !is_classifier,
                    };
                    flat = *out;
                    Layer::Fc(fc)
                }
                LayerSpec::SoftmaxXent => Layer::SoftmaxXent,
            };
            layers.push(layer);
        }
        Ok(Network {
            arch: arch.clone(),
            layers,
            seed,
            caches: Vec::new(),
            activation_norms: Vec::new(),
        })
    }

    /// Realizes `transform` on `arch` and builds the resulting network.
    pub fn from_transform(arch: &ArchSpec, transform: &TransformSpec, seed: u64) -> Result<Self> {
        let (arch, masks) = transform.realize(arch)?;
        Self::new(&arch, masks, seed)
    }

    pub(crate) fn from_layers(arch: ArchSpec, layers: Vec<Layer<T>>, seed: u64) -> Self {
        Network {
            arch,
            layers,
            seed,
            caches: Vec::new(),
            activation_norms: Vec::new(),
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn masks(&self) -> Vec<ConnectivityMask> {
        self.conv_layers().map(|c| c.mask().clone()).collect()
    }

    pub fn set_kernel_path(&mut self, path: KernelPath) {
        self.conv_layers_mut().for_each(|c| c.path = path);
    }

    /// Fraction of possible conv connections that are active.
    pub fn connection_density(&self) -> f64 {
        let (active, cap) = self.conv_layers().fold((0, 0), |(a, c), l| {
            (a + l.active_connections(), c + l.mask().capacity())
        });
        active as f64 / cap.max(1) as f64
    }

    /// Zeroes the classifier so every class gets the same logit.
    pub fn zero_classifier(&mut self) {
        if let Some(Layer::Fc(fc)) = self
            .layers
            .iter_mut()
            .rev()
            .find(|l| matches!(l, Layer::Fc(_)))
        {
            fc.weight.value.iter_mut().for_each(|v| *v = T::zero());
            fc.bias.value.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// L2 norm of every layer's output from the most recent training forward pass.
    pub fn activation_norms(&self) -> &[f64] {
        &self.activation_norms
    }

    fn check_batch(&self, x: &Tensor4<T>) -> Result<()> {
        let i = self.arch.input;
        for (axis, expected, actual) in [
            ("input channels", i.channels, x.channels()),
            ("input height", i.height, x.height()),
            ("input width", i.width, x.width()),
        ] {
            if expected != actual {
                return Err(Error::DimMismatch {
                    axis,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Forward pass. In train mode batch statistics are used, running
    /// statistics are updated, and intermediate state is kept for
    /// [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Matrix<T>> {
        self.check_batch(x)?;
        let keep = mode == Mode::Train;
        self.caches.clear();
        self.activation_norms.clear();
        let mut act = Activation::Spatial(x.clone());
        for layer in self.layers.iter_mut() {
            let (next, cache) = match (layer, act) {
                (Layer::Conv(conv), Activation::Spatial(x)) => {
                    let path = conv.resolved_path();
                    let g = conv.geometry(x.height(), x.width())?;
                    let cols = im2col(&x, &g);
                    let mut y = conv.forward_cols(&cols, &g, x.batch(), path);
                    let mut bn_cache = None;
                    if let Some(bn) = conv.bn.as_mut() {
                        let (z, c) = batchnorm2d_forward(&y, &mut bn.state, mode)?;
                        y = z;
                        bn_cache = Some(c);
                    }
                    relu_inplace(y.data_mut());
                    let cache = keep.then(|| Cache::Conv {
                        cols,
                        geometry: g,
                        input_dims: x.dims(),
                        path,
                        bn: bn_cache,
                        out: y.clone(),
                    });
                    (Activation::Spatial(y), cache)
                }
                (Layer::MaxPool, Activation::Spatial(x)) => {
                    let (y, idx) = maxpool2x2(&x)?;
                    (Activation::Spatial(y), keep.then_some(Cache::Pool(idx)))
                }
                (Layer::Flatten, Activation::Spatial(x)) => {
                    let dims = x.dims();
                    let m = Matrix::from_vec(dims[0], dims[1] * dims[2] * dims[3], x.into_data())?;
                    (Activation::Flat(m), keep.then_some(Cache::Flatten(dims)))
                }
                (Layer::Fc(fc), Activation::Flat(x)) => {
                    let mut y = matmul_bias(&x, &fc.weight_matrix(), &fc.bias.value)?;
                    if fc.relu {
                        relu_inplace(&mut y.data);
                    }
                    let cache = keep.then(|| Cache::Fc {
                        input: x,
                        out: y.clone(),
                    });
                    (Activation::Flat(y), cache)
                }
                (Layer::SoftmaxXent, a @ Activation::Flat(_)) => (a, keep.then_some(Cache::Loss)),
                _ => {
                    return Err(Error::Arch(
                        "layer received an activation of the wrong rank".into(),
                    ))
                }
            };
            if keep {
                self.activation_norms.push(match &next {
                    Activation::Spatial(t) => t.l2_norm(),
                    Activation::Flat(m) => m
                        .data
                        .iter()
                        .map(|v| v.as_f64().powi(2))
                        .sum::<f64>()
                        .sqrt(),
                });
                self.caches.push(cache);
            }
            act = next;
        }
        match act {
            Activation::Flat(m) => Ok(m),
            Activation::Spatial(_) => Err(Error::Arch("network output is not flat".into())),
        }
    }

    /// Eval-mode forward pass that leaves the network untouched.
    pub fn infer(&self, x: &Tensor4<T>) -> Result<Matrix<T>> {
        self.check_batch(x)?;
        let mut act = Activation::Spatial(x.clone());
        for layer in &self.layers {
            act = match (layer, act) {
                (Layer::Conv(conv), Activation::Spatial(x)) => {
                    let g = conv.geometry(x.height(), x.width())?;
                    let cols = im2col(&x, &g);
                    let mut y = conv.forward_cols(&cols, &g, x.batch(), conv.resolved_path());
                    if let Some(bn) = conv.bn.as_ref() {
                        let mut state = bn.state.clone();
                        y = batchnorm2d_forward(&y, &mut state, Mode::Eval)?.0;
                    }
                    relu_inplace(y.data_mut());
                    Activation::Spatial(y)
                }
                (Layer::MaxPool, Activation::Spatial(x)) => Activation::Spatial(maxpool2x2(&x)?.0),
                (Layer::Flatten, Activation::Spatial(x)) => {
                    let d = x.dims();
                    Activation::Flat(Matrix::from_vec(d[0], d[1] * d[2] * d[3], x.into_data())?)
                }
                (Layer::Fc(fc), Activation::Flat(x)) => {
                    let mut y = matmul_bias(&x, &fc.weight_matrix(), &fc.bias.value)?;
                    if fc.relu {
                        relu_inplace(&mut y.data);
                    }
                    Activation::Flat(y)
                }
                (Layer::SoftmaxXent, a) => a,
                _ => {
                    return Err(Error::Arch(
                        "layer received an activation of the wrong rank".into(),
                    ))
                }
            };
        }
        match act {
            Activation::Flat(m) => Ok(m),
            Activation::Spatial(_) => Err(Error::Arch("network output is not flat".into())),
        }
    }

    /// Back-propagates `dlogits` through the cached training forward pass and
    /// stores every parameter gradient in place.
    pub fn backward(&mut self, dlogits: &Matrix<T>) -> Result<()> {
        if self.caches.len() != self.layers.len() {
            return Err(Error::Config(
                "backward requires a preceding train-mode forward pass".into(),
            ));
        }
        let mut grad = Activation::Flat(dlogits.clone());
        let caches = std::mem::take(&mut self.caches);
        for (idx, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            let cache = cache.expect("train-mode forward keeps every cache");
            grad = match (layer, cache, grad) {
                (Layer::SoftmaxXent, Cache::Loss, g) => g,
                (Layer::Fc(fc), Cache::Fc { input, out }, Activation::Flat(mut g)) => {
                    if fc.relu {
                        relu_backward(&out.data, &mut g.data);
                    }
                    let (dx, dw, db) = matmul_bias_backward(&input, &fc.weight_matrix(), &g)?;
                    fc.weight.grad = dw.data;
                    fc.bias.grad = db;
                    Activation::Flat(dx)
                }
                (Layer::Flatten, Cache::Flatten(dims), Activation::Flat(g)) => {
                    Activation::Spatial(Tensor4::from_vec(dims, g.data)?)
                }
                (Layer::MaxPool, Cache::Pool(idx), Activation::Spatial(g)) => {
                    Activation::Spatial(maxpool2x2_backward(&g, &idx))
                }
                (
                    Layer::Conv(conv),
                    Cache::Conv {
                        cols,
                        geometry,
                        input_dims,
                        path,
                        bn,
                        out,
                    },
                    Activation::Spatial(mut g),
                ) => {
                    relu_backward(out.data(), g.data_mut());
                    if let (Some(layer_bn), Some(c)) = (conv.bn.as_mut(), bn.as_ref()) {
                        let (dx, dgamma, dbeta) =
                            batchnorm2d_backward(&g, &layer_bn.state.gamma, c)?;
                        layer_bn.gamma_grad = dgamma;
                        layer_bn.beta_grad = dbeta;
                        g = dx;
                    }
                    let grads = conv.backward_cols(&cols, &geometry, input_dims, &g, path, idx > 0);
                    conv.weight.grad = grads.weights;
                    conv.bias.grad = grads.bias;
                    match grads.input {
                        Some(dx) => Activation::Spatial(dx),
                        None => Activation::Spatial(Tensor4::zeros(input_dims)),
                    }
                }
                _ => return Err(Error::Arch("cache does not match layer".into())),
            };
        }
        Ok(())
    }

    /// Train-mode forward, loss, and backward. Returns the mean batch loss.
    pub fn loss_and_grad(&mut self, x: &Tensor4<T>, labels: &[usize]) -> Result<T> {
        let logits = self.forward(x, Mode::Train)?;
        let (loss, dlogits) = softmax_xent(&logits, labels)?;
        self.backward(&dlogits)?;
        Ok(loss)
    }

    /// Row-wise argmax of eval-mode logits; ties go to the lowest class index.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.infer(x)?))
    }

    /// Trainable parameters in declaration order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        let (mut nc, mut nf) = (0, 0);
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => {
                    let p = format!("conv{nc}");
                    nc += 1;
                    out.push(ParamMut {
                        name: format!("{p}.weight"),
                        value: &mut c.weight.value,
                        grad: &c.weight.grad,
                        velocity: &mut c.weight.velocity,
                    });
                    out.push(ParamMut {
                        name: format!("{p}.bias"),
                        value: &mut c.bias.value,
                        grad: &c.bias.grad,
                        velocity: &mut c.bias.velocity,
                    });
                    if let Some(bn) = c.bn.as_mut() {
                        out.push(ParamMut {
                            name: format!("{p}.bn.gamma"),
                            value: &mut bn.state.gamma,
                            grad: &bn.gamma_grad,
                            velocity: &mut bn.gamma_velocity,
                        });
                        out.push(ParamMut {
                            name: format!("{p}.bn.beta"),
                            value: &mut bn.state.beta,
                            grad: &bn.beta_grad,
                            velocity: &mut bn.beta_velocity,
                        });
                    }
                }
                Layer::Fc(f) => {
                    let p = format!("fc{nf}");
                    nf += 1;
                    out.push(ParamMut {
                        name: format!("{p}.weight"),
                        value: &mut f.weight.value,
                        grad: &f.weight.grad,
                        velocity: &mut f.weight.velocity,
                    });
                    out.push(ParamMut {
                        name: format!("{p}.bias"),
                        value: &mut f.bias.value,
                        grad: &f.bias.grad,
                        velocity: &mut f.bias.velocity,
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// All persistent arrays (parameters and batch norm running statistics)
    /// in declaration order.
    pub fn state_blocks(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        let (mut nc, mut nf) = (0, 0);
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    let p = format!("conv{nc}");
                    nc += 1;
                    out.push((format!("{p}.weight"), c.weight.value.clone()));
                    out.push((format!("{p}.bias"), c.bias.value.clone()));
                    if let Some(bn) = &c.bn {
                        out.push((format!("{p}.bn.gamma"), bn.state.gamma.clone()));
                        out.push((format!("{p}.bn.beta"), bn.state.beta.clone()));
                        out.push((
                            format!("{p}.bn.running_mean"),
                            bn.state.running_mean.clone(),
                        ));
                        out.push((format!("{p}.bn.running_var"), bn.state.running_var.clone()));
                    }
                }
                Layer::Fc(f) => {
                    let p = format!("fc{nf}");
                    nf += 1;
                    out.push((format!("{p}.weight"), f.weight.value.clone()));
                    out.push((format!("{p}.bias"), f.bias.value.clone()));
                }
                _ => {}
            }
        }
        out
    }

    /// Overwrites state from blocks produced by [`Network::state_blocks`].
    pub fn load_state_blocks(&mut self, blocks: &[(String, Vec<T>)]) -> Result<()> {
        let mut it = blocks.iter();
        let mut take = |name: String, dst: &mut Vec<T>| -> Result<()> {
            let (n, v) = it
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
            if *n != name {
                return Err(Error::Checkpoint(format!(
                    "expected block {name}, found {n}"
                )));
            }
            if v.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "block {name} has {} values, expected {}",
                    v.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(v);
            Ok(())
        };
        let (mut nc, mut nf) = (0, 0);
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => {
                    let p = format!("conv{nc}");
                    nc += 1;
                    take(format!("{p}.weight"), &mut c.weight.value)?;
                    take(format!("{p}.bias"), &mut c.bias.value)?;
                    if let Some(bn) = c.bn.as_mut() {
                        take(format!("{p}.bn.gamma"), &mut bn.state.gamma)?;
                        take(format!("{p}.bn.beta"), &mut bn.state.beta)?;
                        take(format!("{p}.bn.running_mean"), &mut bn.state.running_mean)?;
                        take(format!("{p}.bn.running_var"), &mut bn.state.running_var)?;
                    }
                }
                Layer::Fc(f) => {
                    let p = format!("fc{nf}");
                    nf += 1;
                    take(format!("{p}.weight"), &mut f.weight.value)?;
                    take(format!("{p}.bias"), &mut f.bias.value)?;
                }
                _ => {}
            }
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("unexpected trailing blocks".into()));
        }
        Ok(())
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let masks = self.masks();
        let mut out = Network::<U>::new(&self.arch, masks, self.seed).expect("same arch and masks");
        let blocks: Vec<(String, Vec<U>)> = self
            .state_blocks()
            .into_iter()
            .map(|(n, v)| (n, v.into_iter().map(|x| U::lit(x.as_f64())).collect()))
            .collect();
        out.load_state_blocks(&blocks).expect("same layout");
        for (dst, src) in out.conv_layers_mut().zip(self.conv_layers()) {
            dst.path = src.path;
        }
        out
    }
}

pub fn argmax_rows<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
