//! Expert-parallel cluster simulation: M logical workers, the all-to-all
//! dispatch and return as ledgered messages, the coordinator's
//! per-iteration drop decision with its one-byte broadcast, and the four
//! routing modes.
//!
//! Workers are entities inside one process; communication is ledger
//! records rather than sockets, so byte and message counts are exact and
//! every run is reproducible from its seed.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gating::{apply_jitter, gate_probs, hash_route, select_expert, GateDecision};
use crate::moe::{build_plan, combine, expert_forward, MoeModel, RoutingPlan, TokenStatus};
use crate::rng::{domains, RandomStream};

/// How tokens are routed and whether the iteration-level drop applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoutingMode {
    /// Learned gating, never drops.
    Baseline,
    /// Learned gating; dropped iterations route every token to a local
    /// expert, skipping the all-to-all.
    GateDrop,
    /// Learned gating; dropped iterations skip the MoE layer entirely.
    GateExpertDrop,
    /// Routing by token-id hash instead of a gating network; never drops.
    Hash,
}

impl RoutingMode {
    /// Modes that may drop; baseline and hash routing never do.
    pub fn can_drop(self) -> bool {
        matches!(self, RoutingMode::GateDrop | RoutingMode::GateExpertDrop)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Baseline => "baseline",
            RoutingMode::GateDrop => "gate_drop",
            RoutingMode::GateExpertDrop => "gate_expert_drop",
            RoutingMode::Hash => "hash",
        }
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(RoutingMode::Baseline),
            "gate_drop" => Ok(RoutingMode::GateDrop),
            "gate_expert_drop" => Ok(RoutingMode::GateExpertDrop),
            "hash" => Ok(RoutingMode::Hash),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode '{other}' (expected baseline, gate_drop, gate_expert_drop, or hash)"
            ))),
        }
    }
}

/// Static expert placement across workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterTopology {
    workers: usize,
    experts_per_worker: usize,
}

impl ClusterTopology {
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn num_experts(&self) -> usize {
        self.workers * self.experts_per_worker
    }

    pub fn experts_per_worker(&self) -> usize {
        self.experts_per_worker
    }

    /// Worker holding `expert`.
    pub fn worker_of(&self, expert: usize) -> usize {
        expert / self.experts_per_worker
    }

    /// Boolean mask over experts, true exactly for those on `worker`.
    pub fn local_mask(&self, worker: usize) -> Vec<bool> {
        (0..self.num_experts()).map(|e| self.worker_of(e) == worker).collect()
    }
}

/// Places N experts on M workers in contiguous blocks: expert `i` lives
/// on worker `i / (N/M)`.
pub fn place_experts(n: usize, m: usize) -> Result<ClusterTopology> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig(format!(
            "placement needs N >= 1 and M >= 1, got N={n}, M={m}"
        )));
    }
    if n % m != 0 {
        return Err(Error::InvalidConfig(format!(
            "worker count {m} does not divide expert count {n}"
        )));
    }
    Ok(ClusterTopology { workers: m, experts_per_worker: n / m })
}

/// The coordinator's verdict for one iteration, shared by every worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationDecision {
    pub iteration: u64,
    pub drop_on: bool,
    pub mode: RoutingMode,
}

/// Message categories the ledger distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Dispatch,
    Return,
    Broadcast,
}

/// One cross-worker message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageRecord {
    pub iteration: u64,
    pub source_worker: usize,
    pub dest_worker: usize,
    pub kind: MessageKind,
    pub payload_bytes: u64,
}

/// Append-only record of every cross-worker message in a run.
#[derive(Debug, Clone, Default)]
pub struct MessageLedger {
    records: Vec<MessageRecord>,
}

impl MessageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, r: MessageRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[MessageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.payload_bytes).sum()
    }

    /// Total bytes over records matching the given iteration and kind;
    /// `None` matches everything.
    pub fn bytes_where(&self, iteration: Option<u64>, kind: Option<MessageKind>) -> u64 {
        self.matching(iteration, kind).map(|r| r.payload_bytes).sum()
    }

    /// Record count over the same filter as [`bytes_where`](Self::bytes_where).
    pub fn messages_where(&self, iteration: Option<u64>, kind: Option<MessageKind>) -> usize {
        self.matching(iteration, kind).count()
    }

    fn matching(
        &self,
        iteration: Option<u64>,
        kind: Option<MessageKind>,
    ) -> impl Iterator<Item = &MessageRecord> {
        self.records
            .iter()
            .filter(move |r| iteration.is_none_or(|i| r.iteration == i))
            .filter(move |r| kind.is_none_or(|k| r.kind == k))
    }
}

/// Draws the iteration's drop decision on the coordinator (worker 0).
///
/// Exactly one uniform draw is consumed per call in every mode, so
/// decision streams stay aligned when modes are compared under one seed.
/// Baseline and hash never drop regardless of `p`; at inference callers
/// pass `p = 0`.
pub fn coordinator_decide(
    iteration: u64,
    mode: RoutingMode,
    p: f64,
    rng: &mut RandomStream,
) -> Result<IterationDecision> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "drop probability must lie in [0, 1], got {p}"
        )));
    }
    let draw = rng.uniform();
    let drop_on = mode.can_drop() && draw < p;
    Ok(IterationDecision { iteration, drop_on, mode })
}

/// Sends the coordinator's decision to the other M-1 workers as one-byte
/// messages and returns the copy each worker holds.
pub fn broadcast_decision(
    d: IterationDecision,
    topo: &ClusterTopology,
    ledger: &mut MessageLedger,
) -> Vec<IterationDecision> {
    for w in 1..topo.workers() {
        ledger.record(MessageRecord {
            iteration: d.iteration,
            source_worker: 0,
            dest_worker: w,
            kind: MessageKind::Broadcast,
            payload_bytes: 1,
        });
    }
    vec![d; topo.workers()]
}

/// One worker's share of an iteration's tokens. `token_ids` are globally
/// unique stable identifiers; `tokens` are the d-dimensional values.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub worker: usize,
    pub token_ids: Vec<u64>,
    pub tokens: Vec<Vec<f32>>,
}

/// Splits a global batch into contiguous per-worker batches. The first
/// `T mod M` workers receive one extra token.
pub fn partition_tokens(token_ids: &[u64], tokens: &[Vec<f32>], m: usize) -> Result<Vec<TokenBatch>> {
    if token_ids.len() != tokens.len() {
        return Err(Error::InvalidInput(format!(
            "{} token ids against {} tokens",
            token_ids.len(),
            tokens.len()
        )));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("cannot partition across zero workers".into()));
    }
    let t = tokens.len();
    let base = t / m;
    let extra = t % m;
    let mut batches = Vec::with_capacity(m);
    let mut start = 0;
    for w in 0..m {
        let size = base + usize::from(w < extra);
        batches.push(TokenBatch {
            worker: w,
            token_ids: token_ids[start..start + size].to_vec(),
            tokens: tokens[start..start + size].to_vec(),
        });
        start += size;
    }
    Ok(batches)
}

/// A token travelling to its expert's worker, tagged with enough origin
/// information to return it to its exact batch slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchEntry {
    pub origin_worker: usize,
    pub origin_pos: usize,
    pub expert: usize,
    pub payload: Vec<f32>,
}

/// Result of a dispatch: per destination worker, the tokens it will run
/// through its local experts. Origin tags double as the permutation
/// record for the return pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatched {
    pub per_worker: Vec<Vec<DispatchEntry>>,
}

/// Sends every routed token to the worker holding its expert. Cross-worker
/// hops append one dispatch record of `2 * d` bytes each (two-byte floats
/// on the wire); same-worker hops append nothing.
pub fn dispatch_all_to_all(
    batches: &[TokenBatch],
    plans: &[RoutingPlan],
    topo: &ClusterTopology,
    iteration: u64,
    ledger: &mut MessageLedger,
) -> Result<Dispatched> {
    if batches.len() != topo.workers() || plans.len() != topo.workers() {
        return Err(Error::ContractViolation(format!(
            "{} batches and {} plans for {} workers",
            batches.len(),
            plans.len(),
            topo.workers()
        )));
    }
    let mut per_worker = vec![Vec::new(); topo.workers()];
    for (batch, plan) in batches.iter().zip(plans) {
        if plan.entries.len() != batch.tokens.len() {
            return Err(Error::ContractViolation(format!(
                "worker {} plan covers {} tokens but batch holds {}",
                batch.worker,
                plan.entries.len(),
                batch.tokens.len()
            )));
        }
        for (pos, entry) in plan.entries.iter().enumerate() {
            if entry.status != TokenStatus::Routed {
                continue;
            }
            if entry.assigned_expert >= topo.num_experts() {
                return Err(Error::ContractViolation(format!(
                    "plan assigns expert {} but topology holds {}",
                    entry.assigned_expert,
                    topo.num_experts()
                )));
            }
            let dest = topo.worker_of(entry.assigned_expert);
            if dest != batch.worker {
                ledger.record(MessageRecord {
                    iteration,
                    source_worker: batch.worker,
                    dest_worker: dest,
                    kind: MessageKind::Dispatch,
                    payload_bytes: 2 * batch.tokens[pos].len() as u64,
                });
            }
            per_worker[dest].push(DispatchEntry {
                origin_worker: batch.worker,
                origin_pos: pos,
                expert: entry.assigned_expert,
                payload: batch.tokens[pos].clone(),
            });
        }
    }
    Ok(Dispatched { per_worker })
}

/// Routes expert outputs back to each token's origin slot. Return records
/// mirror dispatch records one-for-one. `expert_outputs` must align with
/// `dispatched.per_worker`; the result is indexed `[worker][position]`
/// with `None` for tokens that never dispatched.
pub fn return_all_to_all(
    expert_outputs: &[Vec<Vec<f32>>],
    dispatched: &Dispatched,
    batch_sizes: &[usize],
    topo: &ClusterTopology,
    iteration: u64,
    ledger: &mut MessageLedger,
) -> Result<Vec<Vec<Option<Vec<f32>>>>> {
    if dispatched.per_worker.len() != topo.workers()
        || expert_outputs.len() != dispatched.per_worker.len()
    {
        return Err(Error::ContractViolation(format!(
            "expert outputs for {} workers against a dispatch across {} on a {}-worker topology",
            expert_outputs.len(),
            dispatched.per_worker.len(),
            topo.workers()
        )));
    }
    let mut returned: Vec<Vec<Option<Vec<f32>>>> =
        batch_sizes.iter().map(|&s| vec![None; s]).collect();
    for (dest, (outs, entries)) in expert_outputs.iter().zip(&dispatched.per_worker).enumerate() {
        if outs.len() != entries.len() {
            return Err(Error::ContractViolation(format!(
                "worker {dest} produced {} outputs for {} dispatched tokens",
                outs.len(),
                entries.len()
            )));
        }
        for (out, entry) in outs.iter().zip(entries) {
            if entry.origin_worker != dest {
                ledger.record(MessageRecord {
                    iteration,
                    source_worker: dest,
                    dest_worker: entry.origin_worker,
                    kind: MessageKind::Return,
                    payload_bytes: 2 * out.len() as u64,
                });
            }
            returned[entry.origin_worker][entry.origin_pos] = Some(out.clone());
        }
    }
    Ok(returned)
}

/// Token-traffic totals for one iteration. Broadcast bytes are ledgered
/// separately by [`broadcast_decision`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub dispatch_bytes: u64,
    pub return_bytes: u64,
    pub dispatch_messages: u64,
    pub return_messages: u64,
}

impl CommStats {
    pub fn total_bytes(&self) -> u64 {
        self.dispatch_bytes + self.return_bytes
    }
}

/// Everything that happened to one token during an iteration, in global
/// batch order. Gating fields are `None` when no gating ran (hash routing,
/// or a skipped layer).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    pub id: u64,
    pub origin_worker: usize,
    pub origin_pos: usize,
    pub input: Vec<f32>,
    /// The jittered copy the gating network saw.
    pub gate_input: Option<Vec<f32>>,
    /// Full gate distribution. Present whenever a gating network ran.
    pub probs: Option<Vec<f32>>,
    pub expert: Option<usize>,
    pub gate_prob: Option<f32>,
    pub status: TokenStatus,
    pub output: Vec<f32>,
}

/// Per-worker outputs plus the flat per-token trace and traffic totals
/// for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    /// `outputs[worker][position]`, aligned with the input batches.
    pub outputs: Vec<Vec<Vec<f32>>>,
    pub comm: CommStats,
    pub trace: Vec<TokenTrace>,
}

/// Knobs that stay fixed across a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub seed: u64,
    pub jitter_eps: f32,
    /// When false, dropped gate_drop iterations route locally with
    /// unlimited capacity instead of the caller's cap.
    pub enforce_capacity_on_drop: bool,
}

impl SimParams {
    pub fn new(seed: u64, jitter_eps: f32) -> Self {
        Self { seed, jitter_eps, enforce_capacity_on_drop: true }
    }
}

/// Runs one MoE layer pass across the cluster under the iteration's
/// decision.
///
/// With the drop off every mode runs the full pipeline: jitter, gate,
/// plan, dispatch, expert forward, return, combine. A dropped gate_drop
/// iteration restricts each token's selection to its own worker's experts
/// and so produces zero cross-worker traffic; a dropped gate_expert_drop
/// iteration skips the layer entirely and every token passes through
/// unchanged.
pub fn moe_iteration(
    batches: &[TokenBatch],
    model: &MoeModel,
    topo: &ClusterTopology,
    decision: &IterationDecision,
    cap: usize,
    params: &SimParams,
    ledger: &mut MessageLedger,
) -> Result<IterationOutput> {
    if batches.len() != topo.workers() {
        return Err(Error::InvalidInput(format!(
            "{} batches for {} workers",
            batches.len(),
            topo.workers()
        )));
    }
    if model.num_experts() != topo.num_experts() {
        return Err(Error::InvalidInput(format!(
            "model holds {} experts but topology places {}",
            model.num_experts(),
            topo.num_experts()
        )));
    }
    let d = model.dim();
    for b in batches {
        if b.token_ids.len() != b.tokens.len() {
            return Err(Error::InvalidInput(format!(
                "worker {} has {} ids for {} tokens",
                b.worker,
                b.token_ids.len(),
                b.tokens.len()
            )));
        }
        if let Some(t) = b.tokens.iter().find(|t| t.len() != d) {
            return Err(Error::InvalidInput(format!(
                "token of dimension {} in a dimension-{d} model",
                t.len()
            )));
        }
    }

    if decision.mode == RoutingMode::GateExpertDrop && decision.drop_on {
        let trace = batches
            .iter()
            .flat_map(|b| {
                b.token_ids.iter().zip(&b.tokens).enumerate().map(|(pos, (&id, x))| TokenTrace {
                    id,
                    origin_worker: b.worker,
                    origin_pos: pos,
                    input: x.clone(),
                    gate_input: None,
                    probs: None,
                    expert: None,
                    gate_prob: None,
                    status: TokenStatus::DropBypass,
                    output: x.clone(),
                })
            })
            .collect();
        return Ok(IterationOutput {
            outputs: batches.iter().map(|b| b.tokens.clone()).collect(),
            comm: CommStats::default(),
            trace,
        });
    }

    let local_only = decision.mode == RoutingMode::GateDrop && decision.drop_on;
    let effective_cap = if local_only && !params.enforce_capacity_on_drop {
        usize::MAX
    } else {
        cap
    };

    // Gate every token in global batch order. Jitter streams are keyed by
    // token id, so routing is independent of how tokens sit on workers.
    let n = model.num_experts();
    let mut gate_decisions = Vec::new();
    let mut gate_inputs = Vec::new();
    for b in batches {
        let mask = local_only.then(|| topo.local_mask(b.worker));
        for (&id, x) in b.token_ids.iter().zip(&b.tokens) {
            let (gd, gate_input) = match decision.mode {
                RoutingMode::Hash => {
                    let expert = hash_route(id, n);
                    let mut one_hot = vec![0.0; n];
                    one_hot[expert] = 1.0;
                    (GateDecision { expert_index: expert, gate_prob: 1.0, full_probs: one_hot }, None)
                }
                _ => {
                    let mut jitter_rng =
                        RandomStream::for_stream(params.seed, domains::JITTER, id);
                    let jittered = apply_jitter(x, params.jitter_eps, &mut jitter_rng)?;
                    let probs = gate_probs(&jittered, &model.gating)?;
                    (select_expert(&probs, mask.as_deref())?, Some(jittered))
                }
            };
            gate_decisions.push(gd);
            gate_inputs.push(gate_input);
        }
    }

    let plan = build_plan(&gate_decisions, n, effective_cap);
    let mut plan_entries = plan.entries.iter();
    let per_worker_plans: Vec<RoutingPlan> = batches
        .iter()
        .map(|b| RoutingPlan {
            entries: plan_entries.by_ref().take(b.tokens.len()).cloned().collect(),
            capacity: effective_cap,
        })
        .collect();

    let dispatched = dispatch_all_to_all(batches, &per_worker_plans, topo, decision.iteration, ledger)?;
    let expert_outputs: Vec<Vec<Vec<f32>>> = dispatched
        .per_worker
        .iter()
        .map(|entries| {
            entries
                .iter()
                .map(|e| expert_forward(&model.experts[e.expert], &e.payload))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let batch_sizes: Vec<usize> = batches.iter().map(|b| b.tokens.len()).collect();
    let returned = return_all_to_all(
        &expert_outputs,
        &dispatched,
        &batch_sizes,
        topo,
        decision.iteration,
        ledger,
    )?;

    let comm = CommStats {
        dispatch_bytes: ledger.bytes_where(Some(decision.iteration), Some(MessageKind::Dispatch)),
        return_bytes: ledger.bytes_where(Some(decision.iteration), Some(MessageKind::Return)),
        dispatch_messages: ledger
            .messages_where(Some(decision.iteration), Some(MessageKind::Dispatch))
            as u64,
        return_messages: ledger.messages_where(Some(decision.iteration), Some(MessageKind::Return))
            as u64,
    };

    let mut outputs: Vec<Vec<Vec<f32>>> = Vec::with_capacity(batches.len());
    let mut trace = Vec::with_capacity(plan.entries.len());
    let mut flat = 0;
    for b in batches {
        let mut worker_out = Vec::with_capacity(b.tokens.len());
        for (pos, (&id, x)) in b.token_ids.iter().zip(&b.tokens).enumerate() {
            let entry = &plan.entries[flat];
            let expert_out = returned[b.worker][pos].as_deref();
            let out = combine(x, expert_out, entry.gate_prob, entry.status)?;
            trace.push(TokenTrace {
                id,
                origin_worker: b.worker,
                origin_pos: pos,
                input: x.clone(),
                gate_input: gate_inputs[flat].take(),
                probs: match decision.mode {
                    RoutingMode::Hash => None,
                    _ => Some(gate_decisions[flat].full_probs.clone()),
                },
                expert: Some(entry.assigned_expert),
                gate_prob: Some(entry.gate_prob),
                status: entry.status,
                output: out.clone(),
            });
            worker_out.push(out);
            flat += 1;
        }
        outputs.push(worker_out);
    }

    Ok(IterationOutput { outputs, comm, trace })
}
