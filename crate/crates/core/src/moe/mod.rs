//! Desk-scale mixture-of-experts with top-k softmax gating.
//!
//! The network is a stack of `L` MoE layers acting on a token embedding;
//! each expert is a `d x d` linear map and each layer has its own gate.
//! All arithmetic is f64.

mod gate;
mod merge;
mod network;
mod optim;
mod params;
mod stats;

pub use gate::{gate, top_k_indices, GateOutput};
pub use merge::linear_merge;
pub use network::{forward, loss_and_grads, sgd_step, Example, ForwardOutput, LossAndGrads};
pub use optim::{cosine_with_warmup, AdamW, AdamWConfig};
pub use params::{init_from_bank, Mat, MoeConfig, MoeState, Parameters, LAYER_PLACEHOLDER};
pub use stats::{activation_stats, Routing, RoutingTrace};
