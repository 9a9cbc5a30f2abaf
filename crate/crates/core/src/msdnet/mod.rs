//! Multi-scale dense network with early-exit classifiers.

mod config;
mod flops;
mod network;

pub use config::{BranchPlan, LayerPlan, NetworkConfig, ScaleStep};
pub use flops::{conv_bn_relu_flops, conv_flops, flops_per_exit, head_flops, layer_flops, linear_flops, ExitProfile};
pub use network::{argmax_rows, cumulative_loss, CumulativeLoss, ExitHead, ExitLogits, ForwardCursor, Mode, Network};
