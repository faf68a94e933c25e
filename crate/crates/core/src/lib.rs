//! Deterministic simulator for expert-parallel mixture-of-experts routing
//! with stochastic all-to-all skipping (Gating Dropout).
//!
//! The crate models a cluster of M logical workers holding N experts. Each
//! iteration, a coordinator draws one biased coin and broadcasts the
//! one-byte verdict; on a dropped iteration tokens either route to experts
//! on their own worker (gate_drop) or skip the MoE layer entirely
//! (gate_expert_drop), eliminating the all-to-all exchange that otherwise
//! dominates step time. Everything a real run would send over the network
//! is instead appended to a message ledger, so byte counts are exact and
//! every run replays bit-identically from its seed.
//!
//! Modules:
//! - [`rng`]: counter-based random streams addressed by (seed, stream, counter).
//! - [`math`]: dense matrices, softmax, masked argmax.
//! - [`gating`]: jitter, gate probabilities, top-1 selection, balance loss,
//!   hash routing.
//! - [`moe`]: experts, capacity, routing plans with overflow bypass, combine.
//! - [`cluster`]: topology, coordinator decision, broadcast, all-to-all
//!   dispatch/return, the per-iteration pipeline.
//! - [`cost`]: analytical communication/throughput model.
//! - [`trainer`]: synthetic-task training loop with manual gradients and Adam.

pub mod cluster;
pub mod cost;
pub mod error;
pub mod gating;
pub mod math;
pub mod moe;
pub mod rng;
pub mod trainer;

pub use cluster::{
    broadcast_decision, coordinator_decide, dispatch_all_to_all, moe_iteration, partition_tokens,
    place_experts, return_all_to_all, ClusterTopology, CommStats, DispatchEntry, Dispatched,
    IterationDecision, IterationOutput, MessageKind, MessageLedger, MessageRecord, RoutingMode,
    SimParams, TokenBatch, TokenTrace,
};
pub use cost::{alltoall_bytes, expected_step_comm_bytes, throughput_estimate, CostParams, ThroughputReport};
pub use error::{Error, Result};
pub use gating::{
    apply_jitter, balance_loss, gate_probs, hash_route, select_expert, GateDecision, GatingNetwork,
};
pub use math::{argmax_masked, relu, softmax, Matrix};
pub use moe::{
    build_plan, capacity, combine, expert_forward, Expert, MoeModel, PlanEntry, RoutingPlan,
    TokenStatus,
};
pub use rng::RandomStream;
pub use trainer::{
    adam_step, evaluate, expert_entropy, loss_and_grads, lr_at, train, AdamState, Gradients,
    HyperParams, LossBreakdown, MetricsLog, StepMetrics, SyntheticTask, TrainConfig, TrainModel,
};
