//! Dense and channel-sparse convolution layers, the sequential network,
//! its cost model and checkpoints.

pub mod checkpoint;
mod conv;
mod cost;
mod network;
mod param;

pub use conv::{
    dense_conv_backward, dense_conv_forward, sparse_conv_backward, sparse_conv_forward, BnLayer,
    ConvGrads, ConvLayer, KernelPath, NewConnectionInit, AUTO_DENSE_DENSITY,
};
pub use cost::{arch_cost, cost_report, CostKind, CostReport, LayerCost};
pub use network::{argmax_rows, FcLayer, Layer, Network};
pub use param::{Param, ParamMut};
