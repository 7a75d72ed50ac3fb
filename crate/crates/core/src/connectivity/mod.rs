//! Channel-to-channel connection structures: generation, architecture
//! transforms, budget matching, and aliveness checks.

mod arch;
mod mask;
mod transform;

pub use arch::{ArchSpec, ConvInterface, InputDims, LayerSpec, Shape};
pub(crate) use mask::ceil_guarded;
pub use mask::{
    densify, fan_in, full_mask, sparse_random_mask, sparse_random_mask_with, ConnectivityMask,
    MaskSampler,
};
pub use transform::{
    depth_multiplier_arch, full_masks, interface_fraction, match_budget, realized_conv_params,
    sparsify_arch, sparsify_arch_with, validate_aliveness, DeadChannel, DeadSide, TransformKind,
    TransformSpec,
};
