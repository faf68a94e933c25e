//! Shared fixtures for the benchmark targets.

use gatedrop_core::{place_experts, ClusterTopology, MoeModel, RandomStream, TokenBatch};

/// A model, topology, and per-worker batches sized for benchmarking.
pub struct Fixture {
    pub model: MoeModel,
    pub topo: ClusterTopology,
    pub batches: Vec<TokenBatch>,
}

/// Builds a deterministic fixture with `tokens` tokens spread over `m`
/// workers and `n` experts of width `d`.
pub fn fixture(seed: u64, d: usize, d_ff: usize, n: usize, m: usize, tokens: usize) -> Fixture {
    let model = MoeModel::random(seed, d, d_ff, n).expect("valid fixture dimensions");
    let topo = place_experts(n, m).expect("m divides n");
    let ids: Vec<u64> = (0..tokens as u64).collect();
    let mut rng = RandomStream::new(seed, 1);
    let data: Vec<Vec<f32>> =
        (0..tokens).map(|_| (0..d).map(|_| rng.uniform_range_f32(-1.0, 1.0)).collect()).collect();
    let batches = gatedrop_core::partition_tokens(&ids, &data, m).expect("nonzero workers");
    Fixture { model, topo, batches }
}
