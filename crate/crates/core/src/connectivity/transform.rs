use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, LayerSpec};
use super::mask::{
    ceil_guarded, check_alpha, full_mask, sparse_random_mask_with, ConnectivityMask, MaskSampler,
};
use crate::convnet::arch_cost;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    DepthMultiplier,
    SparseRandom,
    Hybrid,
}

impl TransformKind {
    pub fn label(&self) -> &'static str {
        match self {
            TransformKind::DepthMultiplier => "depth_multiplier",
            TransformKind::SparseRandom => "sparse_random",
            TransformKind::Hybrid => "hybrid",
        }
    }
}

/// Compression directive.
///
/// `alpha` is the per-layer filter multiplier for `DepthMultiplier` and
/// `Hybrid`, and the connection fraction for `SparseRandom`. `Hybrid`
/// additionally carries the connection fraction in `sparsity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampler: MaskSampler,
}

impl TransformSpec {
    pub fn dense() -> Self {
        Self::depth_multiplier(1.0)
    }

    pub fn depth_multiplier(alpha: f64) -> Self {
        TransformSpec {
            kind: TransformKind::DepthMultiplier,
            alpha,
            sparsity: None,
            seed: 0,
            sampler: MaskSampler::FixedFanIn,
        }
    }

    pub fn sparse_random(alpha: f64, seed: u64) -> Self {
        TransformSpec {
            kind: TransformKind::SparseRandom,
            alpha,
            sparsity: None,
            seed,
            sampler: MaskSampler::FixedFanIn,
        }
    }

    pub fn hybrid(multiplier: f64, sparsity: f64, seed: u64) -> Self {
        TransformSpec {
            kind: TransformKind::Hybrid,
            alpha: multiplier,
            sparsity: Some(sparsity),
            seed,
            sampler: MaskSampler::FixedFanIn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        match (self.kind, self.sparsity) {
            (TransformKind::Hybrid, Some(s)) => check_alpha(s),
            (TransformKind::Hybrid, None) => Err(Error::Config(
                "hybrid transform needs a sparsity fraction".into(),
            )),
            (_, Some(_)) => Err(Error::Config(
                "sparsity is only meaningful for the hybrid transform".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Whether conv layers built from this transform use channel-sparse storage.
    pub fn is_sparse(&self) -> bool {
        self.kind != TransformKind::DepthMultiplier
    }

    /// Transformed architecture and one mask per convolution.
    pub fn realize(&self, arch: &ArchSpec) -> Result<(ArchSpec, Vec<ConnectivityMask>)> {
        self.validate()?;
        match self.kind {
            TransformKind::DepthMultiplier => {
                let arch = depth_multiplier_arch(arch, self.alpha)?;
                let masks = full_masks(&arch)?;
                Ok((arch, masks))
            }
            TransformKind::SparseRandom => {
                sparsify_arch_with(arch, self.alpha, self.seed, self.sampler)
            }
            TransformKind::Hybrid => {
                let thin = depth_multiplier_arch(arch, self.alpha)?;
                sparsify_arch_with(&thin, self.sparsity.unwrap(), self.seed, self.sampler)
            }
        }
    }
}

pub fn full_masks(arch: &ArchSpec) -> Result<Vec<ConnectivityMask>> {
    arch.conv_interfaces()?
        .iter()
        .map(|i| full_mask(i.n_in, i.n_out))
        .collect()
}

/// Scales every convolution's channel count `c` to `⌈α·c⌉`. Pooling and
/// fully connected layers are untouched.
pub fn depth_multiplier_arch(arch: &ArchSpec, alpha: f64) -> Result<ArchSpec> {
    check_alpha(alpha)?;
    let mut out = arch.clone();
    for layer in &mut out.layers {
        if let LayerSpec::Conv { out_channels, .. } = layer {
            *out_channels = ceil_guarded(alpha * *out_channels as f64).max(1);
        }
    }
    out.validate()?;
    Ok(out)
}

/// Connection fraction used for an interface: `√α` when either side has a
/// single channel (a fraction `α` of one channel cannot be realized), else `α`.
pub fn interface_fraction(n_in: usize, n_out: usize, alpha: f64) -> f64 {
    if n_in.min(n_out) == 1 {
        alpha.sqrt()
    } else {
        alpha
    }
}

/// Keeps channel counts and draws a random mask for every convolution.
pub fn sparsify_arch(
    arch: &ArchSpec,
    alpha: f64,
    seed: u64,
) -> Result<(ArchSpec, Vec<ConnectivityMask>)> {
    sparsify_arch_with(arch, alpha, seed, MaskSampler::FixedFanIn)
}

pub fn sparsify_arch_with(
    arch: &ArchSpec,
    alpha: f64,
    seed: u64,
    sampler: MaskSampler,
) -> Result<(ArchSpec, Vec<ConnectivityMask>)> {
    check_alpha(alpha)?;
    let masks = arch
        .conv_interfaces()?
        .iter()
        .enumerate()
        .map(|(l, i)| {
            let fraction = interface_fraction(i.n_in, i.n_out, alpha);
            sparse_random_mask_with(
                i.n_in,
                i.n_out,
                fraction,
                derive_seed(seed, l as u64),
                sampler,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((arch.clone(), masks))
}

/// Conv-layer parameter count (weights, biases, batch norm) realized by `spec`.
pub fn realized_conv_params(arch: &ArchSpec, spec: &TransformSpec) -> Result<u64> {
    let (a, masks) = spec.realize(arch)?;
    Ok(arch_cost(&a, &masks)?.conv_params())
}

const MIN_FRACTION: f64 = 1e-9;
const BISECTION_STEPS: usize = 60;

/// Finds the transform of `kind` whose conv-parameter count is closest to
/// `target_params`; on a tie the count at or below the target wins.
///
/// Bisection runs over the connection fraction β. For `DepthMultiplier` the
/// returned `alpha` is the filter multiplier `√β`, so both schemes keep about a
/// β fraction of connections.
pub fn match_budget(
    arch: &ArchSpec,
    target_params: u64,
    kind: TransformKind,
    seed: u64,
) -> Result<TransformSpec> {
    let spec_for = |beta: f64| match kind {
        TransformKind::DepthMultiplier => Ok(TransformSpec::depth_multiplier(beta.sqrt())),
        TransformKind::SparseRandom => Ok(TransformSpec::sparse_random(beta, seed)),
        TransformKind::Hybrid => Err(Error::Config(
            "budget matching supports depth_multiplier and sparse_random".into(),
        )),
    };
    let count = |beta: f64| -> Result<u64> { realized_conv_params(arch, &spec_for(beta)?) };

    let dense = count(1.0)?;
    if target_params > dense {
        return Err(Error::Config(format!(
            "target of {target_params} params exceeds the dense network's {dense}"
        )));
    }
    if target_params == dense {
        return spec_for(1.0);
    }
    let minimum = count(MIN_FRACTION)?;
    if minimum > target_params {
        return Err(Error::UnreachableBudget {
            target: target_params,
            minimum,
        });
    }
    let (mut lo, mut hi) = (MIN_FRACTION, 1.0f64);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if count(mid)? <= target_params {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (below, above) = (count(lo)?, count(hi)?);
    if above - target_params < target_params - below {
        spec_for(hi)
    } else {
        spec_for(lo)
    }
}

/// A channel with no incoming or no outgoing connections.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadChannel {
    /// Index of the convolution (among convolutions) whose mask exposes it.
    pub conv: usize,
    pub channel: usize,
    pub side: DeadSide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadSide {
    /// Output channel of `conv` with zero in-degree.
    NoInput,
    /// Input channel of `conv` with zero out-degree.
    NoOutput,
}

/// Reports every channel with an empty mask row or column along the conv chain.
///
/// Fully connected layers are dense, so in a sequential stack non-empty rows
/// and columns at every interface already give each channel a path to the
/// image and to the prediction.
pub fn validate_aliveness(
    arch: &ArchSpec,
    masks: &[ConnectivityMask],
) -> Result<std::result::Result<(), Vec<DeadChannel>>> {
    let ifaces = arch.conv_interfaces()?;
    if ifaces.len() != masks.len() {
        return Err(Error::DimMismatch {
            axis: "mask count",
            expected: ifaces.len(),
            actual: masks.len(),
        });
    }
    let mut dead = Vec::new();
    for (l, (iface, mask)) in ifaces.iter().zip(masks).enumerate() {
        if mask.n_in() != iface.n_in || mask.n_out() != iface.n_out {
            return Err(Error::DimMismatch {
                axis: "mask shape",
                expected: iface.n_in * iface.n_out,
                actual: mask.capacity(),
            });
        }
        for (channel, s) in mask.row_sums().into_iter().enumerate() {
            if s == 0 {
                dead.push(DeadChannel {
                    conv: l,
                    channel,
                    side: DeadSide::NoInput,
                });
            }
        }
        for (channel, s) in mask.col_sums().into_iter().enumerate() {
            if s == 0 {
                dead.push(DeadChannel {
                    conv: l,
                    channel,
                    side: DeadSide::NoOutput,
                });
            }
        }
    }
    Ok(if dead.is_empty() { Ok(()) } else { Err(dead) })
}
