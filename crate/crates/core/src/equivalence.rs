//! Channel permutations of hidden conv layers and output-identity checks.
//!
//! Relabeling the output channels of every convolution, together with the
//! matching input channels of the next layer (or the flattened blocks of the
//! first fully connected layer), yields a different parameter vector that
//! computes the same function, since every op between two convolutions acts
//! per channel.

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::connectivity::{ArchSpec, ConnectivityMask, LayerSpec};
use crate::convnet::{BnLayer, ConvLayer, FcLayer, Layer, Network, Param};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor4};

/// One permutation per conv layer output. `perms[l][k]` is the old channel
/// that new channel `k` takes over. The network input is never permuted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationSet {
    perms: Vec<Vec<usize>>,
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter()
        .all(|&v| v < p.len() && !std::mem::replace(&mut seen[v], true))
}

impl PermutationSet {
    pub fn new(perms: Vec<Vec<usize>>) -> Result<Self> {
        for (l, p) in perms.iter().enumerate() {
            if !is_permutation(p) {
                return Err(Error::Permutation(format!(
                    "layer {l}: {p:?} is not a permutation"
                )));
            }
        }
        Ok(PermutationSet { perms })
    }

    pub fn identity(sizes: &[usize]) -> Self {
        PermutationSet {
            perms: sizes.iter().map(|&n| (0..n).collect()).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut set = Self::identity(sizes);
        for p in &mut set.perms {
            p.shuffle(rng);
        }
        set
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.perms.iter().map(Vec::len).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(k, &v)| k == v))
    }

    pub fn inverse(&self) -> Self {
        let perms = self
            .perms
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (k, &v) in p.iter().enumerate() {
                    inv[v] = k;
                }
                inv
            })
            .collect();
        PermutationSet { perms }
    }
}

/// `mask'[k][m] = mask[p_out[k]][p_in[m]]`.
pub fn permute_mask(mask: &ConnectivityMask, p_out: &[usize], p_in: &[usize]) -> ConnectivityMask {
    let mut out = ConnectivityMask::empty(mask.n_in(), mask.n_out(), mask.seed())
        .expect("mask dims are nonzero");
    for (k, &o) in p_out.iter().enumerate() {
        for (m, &i) in p_in.iter().enumerate() {
            if mask.get(o, i) {
                out.set(k, m, true);
            }
        }
    }
    out
}

/// Masks of the permuted network, without touching weights.
pub fn permute_masks(
    input_channels: usize,
    masks: &[ConnectivityMask],
    perms: &PermutationSet,
) -> Result<Vec<ConnectivityMask>> {
    check_sizes(&masks.iter().map(|m| m.n_out()).collect::<Vec<_>>(), perms)?;
    let mut p_in: Vec<usize> = (0..input_channels).collect();
    let mut out = Vec::with_capacity(masks.len());
    for (mask, p_out) in masks.iter().zip(&perms.perms) {
        out.push(permute_mask(mask, p_out, &p_in));
        p_in = p_out.clone();
    }
    Ok(out)
}

fn check_sizes(sizes: &[usize], perms: &PermutationSet) -> Result<()> {
    if perms.sizes() != sizes {
        return Err(Error::Permutation(format!(
            "permutation sizes {:?} do not match hidden sizes {sizes:?}",
            perms.sizes()
        )));
    }
    Ok(())
}

/// Everything between two convolutions must act per channel, and nothing
/// spatial may follow the flatten.
fn check_structure(arch: &ArchSpec) -> Result<()> {
    let mut flattened = false;
    for (i, l) in arch.layers.iter().enumerate() {
        match l {
            LayerSpec::Conv { .. } | LayerSpec::MaxPool if flattened => {
                return Err(Error::Permutation(format!(
                    "layer {i}: spatial layer after flatten"
                )))
            }
            LayerSpec::Flatten => flattened = true,
            LayerSpec::Fc { .. } if !flattened => {
                return Err(Error::Permutation(format!(
                    "layer {i}: fully connected layer mixes channels before flatten"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn gather<T: Copy>(v: &[T], p: &[usize]) -> Vec<T> {
    p.iter().map(|&i| v[i]).collect()
}

fn permute_conv<T: Scalar>(
    layer: &ConvLayer<T>,
    p_out: &[usize],
    p_in: &[usize],
) -> Result<ConvLayer<T>> {
    let mask = permute_mask(layer.mask(), p_out, p_in);
    let kk = layer.kernel_len();
    let mut weights = Vec::with_capacity(layer.weight.len());
    for (k, &o) in p_out.iter().enumerate() {
        let old_slots = &layer.slots()[o];
        for m in mask.row_inputs(k) {
            let s = old_slots
                .binary_search(&p_in[m])
                .expect("permuted mask entry exists in the original");
            weights.extend_from_slice(layer.kernel(o, s));
        }
    }
    debug_assert_eq!(weights.len(), layer.active_connections() * kk);
    let bias = gather(&layer.bias.value, p_out);
    let bn = layer.bn.as_ref().map(|b| {
        let mut nb: BnLayer<T> = b.clone();
        nb.state.gamma = gather(&b.state.gamma, p_out);
        nb.state.beta = gather(&b.state.beta, p_out);
        nb.state.running_mean = gather(&b.state.running_mean, p_out);
        nb.state.running_var = gather(&b.state.running_var, p_out);
        nb.gamma_grad = gather(&b.gamma_grad, p_out);
        nb.beta_grad = gather(&b.beta_grad, p_out);
        nb.gamma_velocity = gather(&b.gamma_velocity, p_out);
        nb.beta_velocity = gather(&b.beta_velocity, p_out);
        nb
    });
    ConvLayer::from_parts(mask, layer, weights, bias, bn)
}

/// Rows of the first FC weight are `(c, h, w)` flattened channel-major, so a
/// channel permutation moves whole blocks of `plane` rows.
fn permute_fc_input<T: Scalar>(fc: &FcLayer<T>, p: &[usize], plane: usize) -> FcLayer<T> {
    let row = fc.d_out;
    let permute_rows = |v: &[T]| {
        let mut out = Vec::with_capacity(v.len());
        for &c in p {
            out.extend_from_slice(&v[c * plane * row..(c + 1) * plane * row]);
        }
        out
    };
    FcLayer {
        weight: Param {
            value: permute_rows(&fc.weight.value),
            grad: permute_rows(&fc.weight.grad),
            velocity: permute_rows(&fc.weight.velocity),
        },
        bias: fc.bias.clone(),
        d_in: fc.d_in,
        d_out: fc.d_out,
        relu: fc.relu,
    }
}

/// The network with every hidden conv layer's channels relabeled by `perms`.
pub fn permute_network<T: Scalar>(net: &Network<T>, perms: &PermutationSet) -> Result<Network<T>> {
    let arch = net.arch();
    check_structure(arch)?;
    check_sizes(&arch.hidden_conv_sizes(), perms)?;
    let mut p_in: Vec<usize> = (0..arch.input.channels).collect();
    let mut next = perms.perms.iter();
    let mut layers = Vec::with_capacity(net.layers().len());
    let mut flattened_from: Option<usize> = None;
    let mut first_fc_done = false;
    for layer in net.layers() {
        let new = match layer {
            Layer::Conv(c) => {
                let p_out = next.next().expect("sizes checked");
                let l = permute_conv(c, p_out, &p_in)?;
                p_in = p_out.clone();
                Layer::Conv(l)
            }
            Layer::Flatten => {
                flattened_from = Some(p_in.len());
                Layer::Flatten
            }
            Layer::Fc(fc) if !first_fc_done => {
                first_fc_done = true;
                let channels = flattened_from.expect("structure checked");
                Layer::Fc(permute_fc_input(fc, &p_in, fc.d_in / channels))
            }
            other => other.clone(),
        };
        layers.push(new);
    }
    Ok(Network::from_layers(arch.clone(), layers, net.seed()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub tol: f64,
    pub max_abs_diff: f64,
    pub pass: bool,
}

/// Runs `trials` random batches of `batch` inputs in `[0, 1)` through both
/// networks in eval mode and compares logits elementwise.
pub fn verify_equivalence<T: Scalar>(
    a: &Network<T>,
    b: &Network<T>,
    trials: usize,
    batch: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let (ia, ib) = (a.arch().input, b.arch().input);
    if ia != ib {
        return Err(Error::DimMismatch {
            axis: "input size",
            expected: ia.channels * ia.height * ia.width,
            actual: ib.channels * ib.height * ib.width,
        });
    }
    if a.arch().classes != b.arch().classes {
        return Err(Error::DimMismatch {
            axis: "classes",
            expected: a.arch().classes,
            actual: b.arch().classes,
        });
    }
    let mut rng = rng::stream(seed, Stream::Verify);
    let unit = Uniform::new(0.0f64, 1.0).expect("valid range");
    let dims = [batch.max(1), ia.channels, ia.height, ia.width];
    let mut max_abs_diff = 0.0f64;
    for _ in 0..trials {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::lit(unit.sample(&mut rng)))
            .collect();
        let x = Tensor4::from_vec(dims, data)?;
        let (ya, yb) = (a.infer(&x)?, b.infer(&x)?);
        for (u, v) in ya.data.iter().zip(&yb.data) {
            let d = (u.as_f64() - v.as_f64()).abs();
            max_abs_diff = if d.is_nan() {
                f64::INFINITY
            } else {
                max_abs_diff.max(d)
            };
        }
    }
    Ok(EquivalenceReport {
        trials,
        tol,
        max_abs_diff,
        pass: max_abs_diff < tol,
    })
}

/// `∏ n_i!` over the hidden conv layer sizes.
pub fn equivalence_class_size(arch: &ArchSpec) -> BigUint {
    class_size_from_sizes(&arch.hidden_conv_sizes())
}

pub fn class_size_from_sizes(sizes: &[usize]) -> BigUint {
    let mut acc = BigUint::from(1u32);
    for &n in sizes {
        for k in 2..=n {
            acc *= BigUint::from(k);
        }
    }
    acc
}
