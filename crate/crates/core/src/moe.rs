//! Expert feedforward networks, capacity arithmetic, routing-plan
//! construction with overflow bypass, and the gate-weighted combine.

use crate::error::{Error, Result};
use crate::gating::{GateDecision, GatingNetwork};
use crate::math::{relu, Matrix};
use crate::rng::{domains, RandomStream};

/// One expert: a two-layer feedforward network with rectifier activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// First layer, d_ff x d.
    pub w1: Matrix,
    /// Second layer, d x d_ff.
    pub w2: Matrix,
}

impl Expert {
    pub fn new(w1: Matrix, w2: Matrix) -> Result<Self> {
        if w2.cols() != w1.rows() || w1.cols() != w2.rows() {
            return Err(Error::InvalidConfig(format!(
                "expert layer shapes {}x{} and {}x{} do not compose",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols()
            )));
        }
        Ok(Self { w1, w2 })
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }
}

/// `W2 . relu(W1 . x)`; preserves the token dimension.
pub fn expert_forward(e: &Expert, x: &[f32]) -> Result<Vec<f32>> {
    let hidden = relu(&e.w1.matvec(x)?);
    e.w2.matvec(&hidden)
}

/// Per-expert token budget: `ceil(cf * total_tokens / N)`.
pub fn capacity(total_tokens: usize, n: usize, cf: f64) -> usize {
    assert!(n >= 1, "capacity needs at least one expert");
    assert!(cf > 0.0, "capacity factor must be positive");
    (cf * total_tokens as f64 / n as f64).ceil() as usize
}

/// What happened to a token inside one MoE layer pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenStatus {
    /// Sent to its expert; output is gate_prob times the expert output.
    Routed,
    /// Expert was over capacity; token passes through unchanged.
    OverflowBypass,
    /// The layer was skipped this iteration; token passes through unchanged.
    DropBypass,
}

/// Routing outcome for one token in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub assigned_expert: usize,
    pub gate_prob: f32,
    pub status: TokenStatus,
}

/// Routing outcomes for a whole batch, in batch order. Per expert, at most
/// `capacity` entries carry `Routed`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pub entries: Vec<PlanEntry>,
    pub capacity: usize,
}

impl RoutingPlan {
    /// Number of `Routed` entries assigned to each of the `n` experts.
    pub fn routed_counts(&self, n: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n];
        for e in &self.entries {
            if e.status == TokenStatus::Routed {
                counts[e.assigned_expert] += 1;
            }
        }
        counts
    }
}

/// Assigns tokens to experts first-come-first-served in batch order; once
/// an expert holds `cap` tokens, later arrivals become `OverflowBypass`.
pub fn build_plan(decisions: &[GateDecision], n: usize, cap: usize) -> RoutingPlan {
    let mut filled = vec![0usize; n];
    let entries = decisions
        .iter()
        .map(|d| {
            let status = if filled[d.expert_index] < cap {
                filled[d.expert_index] += 1;
                TokenStatus::Routed
            } else {
                TokenStatus::OverflowBypass
            };
            PlanEntry { assigned_expert: d.expert_index, gate_prob: d.gate_prob, status }
        })
        .collect();
    RoutingPlan { entries, capacity: cap }
}

/// Final per-token output of the layer: `gate_prob * expert_out` for
/// routed tokens, the unchanged input for both bypass kinds.
pub fn combine(
    x: &[f32],
    expert_out: Option<&[f32]>,
    gate_prob: f32,
    status: TokenStatus,
) -> Result<Vec<f32>> {
    match status {
        TokenStatus::Routed => {
            let out = expert_out.ok_or_else(|| {
                Error::ContractViolation("routed token without an expert output".into())
            })?;
            Ok(out.iter().map(|&v| gate_prob * v).collect())
        }
        TokenStatus::OverflowBypass | TokenStatus::DropBypass => Ok(x.to_vec()),
    }
}

/// A full MoE layer: the gating network plus its expert bank.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub gating: GatingNetwork,
    pub experts: Vec<Expert>,
}

impl MoeModel {
    pub fn new(gating: GatingNetwork, experts: Vec<Expert>) -> Result<Self> {
        if gating.num_experts() != experts.len() {
            return Err(Error::InvalidConfig(format!(
                "gating network has {} rows but {} experts given",
                gating.num_experts(),
                experts.len()
            )));
        }
        for (i, e) in experts.iter().enumerate() {
            if e.dim() != gating.dim() {
                return Err(Error::InvalidConfig(format!(
                    "expert {i} has dim {} but gating network has dim {}",
                    e.dim(),
                    gating.dim()
                )));
            }
        }
        Ok(Self { gating, experts })
    }

    /// Uniform init scaled by fan-in, one stream per weight tensor so the
    /// result is independent of construction order.
    pub fn random(seed: u64, d: usize, d_ff: usize, n: usize) -> Result<Self> {
        let bound = |fan_in: usize| (1.0 / fan_in as f32).sqrt();
        let stream = |index: u64| RandomStream::for_stream(seed, domains::MODEL_INIT, index);
        let w_r = Matrix::random_uniform(n, d, -bound(d), bound(d), &mut stream(0));
        let experts = (0..n)
            .map(|i| {
                let w1 = Matrix::random_uniform(
                    d_ff,
                    d,
                    -bound(d),
                    bound(d),
                    &mut stream(1 + 2 * i as u64),
                );
                let w2 = Matrix::random_uniform(
                    d,
                    d_ff,
                    -bound(d_ff),
                    bound(d_ff),
                    &mut stream(2 + 2 * i as u64),
                );
                Expert::new(w1, w2)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(GatingNetwork::new(w_r)?, experts)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.gating.dim()
    }
}
