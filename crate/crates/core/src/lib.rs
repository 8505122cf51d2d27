//! Token compression by semantic slot aggregation.
//!
//! A linear gate scores every patch feature against `K` slots, each patch is
//! routed to its Top-k slots (Top-2 by default), routed patches are pooled
//! into one vector per slot by probability-weighted averaging, and a small
//! MLP refines each pooled slot. The output has exactly `K` tokens no matter
//! how many patches came in.
//!
//! Training adds three routing regularizers (load balancing, entropy of the
//! mean gate distribution, and a z-loss on gate logits) to a task loss.
//! Gradients are derived by hand in [`gradients`] and certified against
//! central finite differences.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the working precision at `f64`.

pub mod aggregator;
pub mod error;
pub mod format;
pub mod gradients;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod trainer;

pub use aggregator::{
    aggregate_slots, compress, compress_item, refine_slots, Activation, CompressConfig, CompressedItem, SlotMlpParams,
    SlotRefiner, SlotTokens,
};
pub use error::{Error, Result};
pub use gradients::{
    backward, check_pipeline, finite_difference_grad, forward, grad_check, CheckReport, CheckSettings,
};
pub use losses::{
    entropy_loss, switch_loss, task_loss_cross_entropy, total_loss, z_loss, LossBreakdown, LossConstants,
};
pub use model::{FeatureBatch, HeadParams, ModelConfig, ModelParams};
pub use numerics::{log_sum_exp_rows, softmax_rows, DenseMatrix};
pub use rng::{gaussian_sample, RngState};
pub use router::{gate_forward, routing_stats, top_k_select, GateParams, RoutingStats, RoutingTable};
pub use scalar::Scalar;

pub type Matrix = DenseMatrix<f64>;
pub type Params = ModelParams<f64>;
pub type Gradients = gradients::GradientSet<f64>;
pub type Routing = RoutingTable<f64>;
pub type Stats = RoutingStats<f64>;
pub type Losses = LossBreakdown<f64>;
pub type Tokens = SlotTokens<f64>;
pub type Batch = FeatureBatch<f64>;
