#![allow(dead_code)]

use chansparse::connectivity::{ArchSpec, ConnectivityMask, InputDims, LayerSpec};
use chansparse::convnet::ConvLayer;
use chansparse::rng;
use chansparse::tensor::{Padding, Tensor4};
use rand::Rng;

pub fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut r = rng::from_seed(seed);
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::from_seed(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Leading padding and output size, written out independently of the library.
fn axis(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, isize) {
    match padding {
        Padding::Valid => ((input - k) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let need = ((out - 1) * stride + k) as isize - input as isize;
            (out, need.max(0) / 2)
        }
    }
}

/// Direct summation over batch, outputs, connected inputs, rows, columns
/// and kernel taps. Reads weights through the layer's slot lists.
pub fn naive_conv(x: &Tensor4<f64>, layer: &ConvLayer<f64>) -> Tensor4<f64> {
    let [n, _, h, w] = x.dims();
    let (kh, kw) = layer.kernel_size();
    let s = layer.stride();
    let (oh, pt) = axis(h, kh, s, layer.padding());
    let (ow, pl) = axis(w, kw, s, layer.padding());
    let mut out = Tensor4::zeros([n, layer.n_out(), oh, ow]);
    for b in 0..n {
        for o in 0..layer.n_out() {
            for (slot, &i) in layer.slots()[o].iter().enumerate() {
                let k = layer.kernel(o, slot);
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for r in 0..kh {
                            for c in 0..kw {
                                let iy = (y * s) as isize + r as isize - pt;
                                let ix = (xx * s) as isize + c as isize - pl;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.get(b, i, iy as usize, ix as usize) * k[r * kw + c];
                                }
                            }
                        }
                        let idx = out.index(b, o, y, xx);
                        out.data_mut()[idx] += acc;
                    }
                }
            }
            for y in 0..oh {
                for xx in 0..ow {
                    let idx = out.index(b, o, y, xx);
                    out.data_mut()[idx] += layer.bias.value[o];
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Per-layer `(params, madds)` found by walking every active connection,
/// every output pixel and every FC weight one at a time.
pub fn enumerate_cost(arch: &ArchSpec, masks: &[ConnectivityMask]) -> Vec<(u64, u64)> {
    let (mut c, mut h, mut w) = (arch.input.channels, arch.input.height, arch.input.width);
    let mut flat = None;
    let mut mi = 0;
    let mut out = Vec::new();
    for layer in &arch.layers {
        match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                batch_norm,
            } => {
                let m = &masks[mi];
                mi += 1;
                let (oh, _) = axis(h, kernel_h, stride, padding);
                let (ow, _) = axis(w, kernel_w, stride, padding);
                let (mut params, mut madds) = (0u64, 0u64);
                for o in 0..out_channels {
                    for i in 0..c {
                        if m.get(o, i) {
                            for _tap in 0..kernel_h * kernel_w {
                                params += 1;
                                for _pix in 0..oh * ow {
                                    madds += 1;
                                }
                            }
                        }
                    }
                    params += 1;
                    if batch_norm {
                        params += 2;
                    }
                }
                out.push((params, madds));
                (c, h, w) = (out_channels, oh, ow);
            }
            LayerSpec::MaxPool => {
                (h, w) = (h.div_ceil(2), w.div_ceil(2));
            }
            LayerSpec::Flatten => flat = Some(c * h * w),
            LayerSpec::Fc { out: k } => {
                let d = flat.expect("fc after flatten");
                let mut params = 0u64;
                let mut madds = 0u64;
                for _ in 0..d {
                    for _ in 0..k {
                        params += 1;
                        madds += 1;
                    }
                }
                out.push((params + k as u64, madds));
                flat = Some(k);
            }
            LayerSpec::SoftmaxXent => {}
        }
    }
    out
}

pub fn conv(c: usize, k: usize, bn: bool) -> LayerSpec {
    LayerSpec::conv(c, k, bn)
}

/// Two hidden conv layers of 3 and 2 channels.
pub fn arch_3_2() -> ArchSpec {
    ArchSpec {
        input: InputDims {
            channels: 1,
            height: 6,
            width: 6,
        },
        classes: 3,
        layers: vec![
            conv(3, 3, true),
            LayerSpec::MaxPool,
            conv(2, 3, true),
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 3 },
            LayerSpec::SoftmaxXent,
        ],
    }
}

/// A handful of small architectures covering odd sizes, strides, VALID
/// padding, hidden FC layers and BN on/off.
pub fn test_archs() -> Vec<ArchSpec> {
    let odd = ArchSpec {
        input: InputDims {
            channels: 3,
            height: 9,
            width: 7,
        },
        classes: 5,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 6,
                kernel_h: 3,
                kernel_w: 2,
                stride: 2,
                padding: Padding::Same,
                batch_norm: false,
            },
            LayerSpec::MaxPool,
            LayerSpec::Conv {
                out_channels: 4,
                kernel_h: 1,
                kernel_w: 1,
                stride: 1,
                padding: Padding::Valid,
                batch_norm: true,
            },
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 7 },
            LayerSpec::Fc { out: 5 },
            LayerSpec::SoftmaxXent,
        ],
    };
    let deep = ArchSpec {
        input: InputDims {
            channels: 2,
            height: 12,
            width: 12,
        },
        classes: 4,
        layers: vec![
            conv(8, 3, true),
            conv(12, 3, true),
            LayerSpec::MaxPool,
            conv(5, 5, false),
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 4 },
            LayerSpec::SoftmaxXent,
        ],
    };
    vec![ArchSpec::mnist(), arch_3_2(), odd, deep]
}

/// Small net for gradient and training checks.
pub fn tiny_arch(bn: bool) -> ArchSpec {
    ArchSpec {
        input: InputDims {
            channels: 2,
            height: 6,
            width: 6,
        },
        classes: 3,
        layers: vec![
            conv(4, 3, bn),
            LayerSpec::MaxPool,
            conv(5, 3, bn),
            LayerSpec::Flatten,
            LayerSpec::Fc { out: 6 },
            LayerSpec::Fc { out: 3 },
            LayerSpec::SoftmaxXent,
        ],
    }
}
