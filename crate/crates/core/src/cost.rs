//! Analytical communication and throughput model.
//!
//! A latency-plus-bandwidth model of one training step: per-token compute
//! parallelizes across the M workers, while all-to-all traffic grows with
//! the cross-worker fraction (M-1)/M and pays a per-message latency on
//! every peer link. Skipping all-to-alls with probability p removes that
//! fraction of the expected communication; gate_expert_drop additionally
//! removes the skipped iterations' expert compute.

use crate::cluster::RoutingMode;
use crate::error::{Error, Result};

/// Calibration of the cost model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// Sequences per step (B).
    pub batch: usize,
    /// Tokens per sequence (L).
    pub seq_len: usize,
    /// Model width (d).
    pub d_model: usize,
    /// Worker count (M).
    pub workers: usize,
    /// MoE sub-layers per forward pass.
    pub moe_layers: usize,
    /// All sub-layers per forward pass, MoE ones included.
    pub total_layers: usize,
    /// All-to-all rounds per step per MoE layer; 2 covers forward plus
    /// the backward re-dispatch along the same permutation.
    pub passes_per_step: usize,
    /// Link bandwidth in bytes per second.
    pub link_bandwidth: f64,
    /// Fixed cost of one cross-worker message, in seconds.
    pub per_message_latency: f64,
    /// Seconds of single-worker compute per token per layer.
    pub compute_time_per_token_per_layer: f64,
}

impl CostParams {
    /// Calibration for desk-scale runs: tiny batches, a 12-layer model
    /// with 6 MoE sub-layers, a 100 Gbit/s link.
    pub fn desk_default() -> Self {
        Self {
            batch: 4,
            seq_len: 16,
            d_model: 8,
            workers: 4,
            moe_layers: 6,
            total_layers: 12,
            passes_per_step: 2,
            link_bandwidth: 12.5e9,
            per_message_latency: 5e-6,
            compute_time_per_token_per_layer: 2e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("workers", self.workers),
            ("moe_layers", self.moe_layers),
            ("total_layers", self.total_layers),
            ("passes_per_step", self.passes_per_step),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.moe_layers > self.total_layers {
            return Err(Error::InvalidConfig(format!(
                "moe_layers {} exceeds total_layers {}",
                self.moe_layers, self.total_layers
            )));
        }
        if !(self.link_bandwidth > 0.0 && self.link_bandwidth.is_finite()) {
            return Err(Error::InvalidConfig("link_bandwidth must be positive".into()));
        }
        if !(self.per_message_latency >= 0.0 && self.per_message_latency.is_finite()) {
            return Err(Error::InvalidConfig("per_message_latency must be >= 0".into()));
        }
        if !(self.compute_time_per_token_per_layer > 0.0
            && self.compute_time_per_token_per_layer.is_finite())
        {
            return Err(Error::InvalidConfig("compute_time_per_token must be positive".into()));
        }
        Ok(())
    }

    /// Tokens processed per step.
    pub fn step_tokens(&self) -> usize {
        self.batch * self.seq_len
    }
}

/// Data volume of one all-to-all over a B x L token batch of width d,
/// at two bytes per number: `2 * B * L * d`.
pub fn alltoall_bytes(b: usize, l: usize, d: usize) -> u64 {
    2 * b as u64 * l as u64 * d as u64
}

/// Expected cross-worker token bytes in one step when each all-to-all is
/// skipped with probability p and routing is uniform over experts:
/// `(1-p) * 2BLd * 2 * moe_layers * passes * (M-1)/M`. The factor 2 after
/// the volume covers dispatch plus return; (M-1)/M is the fraction of
/// uniformly routed tokens whose expert lives on another worker.
pub fn expected_step_comm_bytes(
    p: f64,
    b: usize,
    l: usize,
    d: usize,
    moe_layers: usize,
    passes_per_step: usize,
    m: usize,
) -> f64 {
    assert!((0.0..=1.0).contains(&p), "drop probability {p} outside [0, 1]");
    assert!(m >= 1, "need at least one worker");
    (1.0 - p)
        * alltoall_bytes(b, l, d) as f64
        * 2.0
        * moe_layers as f64
        * passes_per_step as f64
        * (m as f64 - 1.0)
        / m as f64
}

/// Modeled timing of one step and the resulting token rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputReport {
    pub tokens_per_second: f64,
    pub comm_seconds_per_step: f64,
    pub compute_seconds_per_step: f64,
}

/// Predicts step time under drop probability `p` in the given mode.
///
/// Communication: expected bytes over the link bandwidth, plus per-message
/// latency on each of the (M-1) peer links, twice per MoE layer per pass,
/// for the (1-p) fraction of steps that communicate. Compute: per-token
/// per-layer time over all layers, spread across the M workers;
/// gate_expert_drop skips the expert layers' compute on the p fraction of
/// dropped iterations. Baseline and hash routing never drop, so their
/// reports ignore `p`.
pub fn throughput_estimate(
    params: &CostParams,
    p: f64,
    mode: RoutingMode,
) -> Result<ThroughputReport> {
    params.validate()?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "drop probability must lie in [0, 1], got {p}"
        )));
    }
    let p = if mode.can_drop() { p } else { 0.0 };
    let m = params.workers as f64;
    let bytes = expected_step_comm_bytes(
        p,
        params.batch,
        params.seq_len,
        params.d_model,
        params.moe_layers,
        params.passes_per_step,
        params.workers,
    );
    let messages_per_step =
        (m - 1.0) * 2.0 * params.moe_layers as f64 * params.passes_per_step as f64;
    let comm = bytes / params.link_bandwidth
        + (1.0 - p) * params.per_message_latency * messages_per_step;

    let effective_layers = match mode {
        RoutingMode::GateExpertDrop => params.total_layers as f64 - p * params.moe_layers as f64,
        _ => params.total_layers as f64,
    };
    let tokens = params.step_tokens() as f64;
    let compute = tokens * params.compute_time_per_token_per_layer * effective_layers / m;

    Ok(ThroughputReport {
        tokens_per_second: tokens / (comm + compute),
        comm_seconds_per_step: comm,
        compute_seconds_per_step: compute,
    })
}
