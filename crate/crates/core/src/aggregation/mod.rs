//! Layer aggregation: the recurrent cell and the dense-buffer aggregators.

pub mod dense;
pub mod rla;

pub use dense::{
    conv1_partition_check, dense_layer_forward, DenseBuffer, DenseLayerDims, DenseMode, SharedBank,
};
pub use rla::{
    rla_block_forward, rla_head, rla_stage_transition, ActivationOrder, BlockOut, Merge,
    RlaConfig, RlaStage, Sharing, Tap, Variant,
};
