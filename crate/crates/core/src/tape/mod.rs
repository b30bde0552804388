//! Reverse-mode autodiff with explicit context capture.

pub mod engine;
pub mod graph;
pub mod store;

pub use engine::{
    backward, capture_context, checkpointed_backward, dropout_vjp, forward, keys_from_seeds,
    linear_vjp, maxpool2d_vjp, relu_vjp, run_forward, softmax_ce_loss, softmax_ce_vjp, step_keys,
    tanh_vjp, Gradients, Trace,
};
pub use graph::{
    model_from_json, model_to_json, Batch, ModelGraph, Node, NodeKind, ParamRole, ParamSet,
    ParamSpec, SlotId, SlotInfo, SlotKind,
};
pub use store::{ContextStore, Footprint, Payload};
