//! Top-1 gating: jitter, gate probabilities, expert selection, the
//! load-balancing auxiliary loss, and the hash-routing baseline.

use crate::error::{Error, Result};
use crate::math::{argmax_masked, softmax, Matrix};
use crate::rng::{mix64, RandomStream};

/// The gating network. One linear map from token space to expert logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNetwork {
    /// Router weights, one row per expert (N x d).
    pub w_r: Matrix,
}

impl GatingNetwork {
    pub fn new(w_r: Matrix) -> Result<Self> {
        if w_r.rows() == 0 || w_r.cols() == 0 {
            return Err(Error::InvalidConfig(format!(
                "gating network needs N >= 1 and d >= 1, got {}x{}",
                w_r.rows(),
                w_r.cols()
            )));
        }
        Ok(Self { w_r })
    }

    pub fn num_experts(&self) -> usize {
        self.w_r.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_r.cols()
    }
}

/// Outcome of routing one token: the selected expert, its unrenormalized
/// gate probability, and the full distribution the choice came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub expert_index: usize,
    pub gate_prob: f32,
    pub full_probs: Vec<f32>,
}

/// Multiplies each coordinate by an independent uniform draw from
/// `[1-eps, 1+eps]`. Applied to the gating input only; the expert always
/// sees the unjittered token. `eps = 0` returns the input unchanged and
/// consumes no draws.
pub fn apply_jitter(x: &[f32], eps: f32, rng: &mut RandomStream) -> Result<Vec<f32>> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::InvalidConfig(format!("jitter eps must be >= 0, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(x.iter()
        .map(|&v| v * rng.uniform_range_f32(1.0 - eps, 1.0 + eps))
        .collect())
}

/// Gate probabilities for one token: softmax(W_r . x).
pub fn gate_probs(x: &[f32], g: &GatingNetwork) -> Result<Vec<f32>> {
    let logits = g.w_r.matvec(x)?;
    softmax(&logits)
}

/// Picks the argmax expert among unmasked positions. The gate probability
/// is taken from `probs` as-is, never renormalized after masking.
pub fn select_expert(probs: &[f32], local_mask: Option<&[bool]>) -> Result<GateDecision> {
    let expert_index = argmax_masked(probs, local_mask)?;
    Ok(GateDecision {
        expert_index,
        gate_prob: probs[expert_index],
        full_probs: probs.to_vec(),
    })
}

/// Switch-style auxiliary loss `alpha * N * sum_i f_i * P_i` where `f` is
/// the fraction of tokens assigned to each expert and `P` the batch-mean
/// gate probability.
pub fn balance_loss(assign_fractions: &[f32], mean_probs: &[f32], alpha: f32) -> Result<f32> {
    if assign_fractions.len() != mean_probs.len() {
        return Err(Error::InvalidInput(format!(
            "balance loss over {} fractions and {} probabilities",
            assign_fractions.len(),
            mean_probs.len()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    for (name, v) in [("assign_fractions", assign_fractions), ("mean_probs", mean_probs)] {
        let sum: f64 = v.iter().map(|&x| x as f64).sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidInput(format!("{name} sums to {sum}, expected 1")));
        }
    }
    let n = assign_fractions.len() as f64;
    let dot: f64 = assign_fractions
        .iter()
        .zip(mean_probs)
        .map(|(&f, &p)| f as f64 * p as f64)
        .sum();
    Ok((alpha as f64 * n * dot) as f32)
}

/// Routes a token to a uniformly hashed expert keyed by its stable
/// identifier, independent of the token's contents.
pub fn hash_route(token_id: u64, n: usize) -> usize {
    assert!(n >= 1, "hash_route needs at least one expert");
    // Multiply-shift maps the hash onto [0, n) without modulo bias.
    ((mix64(token_id) as u128 * n as u128) >> 64) as usize
}
