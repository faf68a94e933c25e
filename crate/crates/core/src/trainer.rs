//! Desk-scale training of a one-MoE-layer model on synthetic clustered
//! regression data: manual gradients, Adam with an inverse-square-root
//! schedule, the balancing loss, and per-step metrics.

use crate::cluster::{
    broadcast_decision, coordinator_decide, moe_iteration, partition_tokens, place_experts,
    IterationDecision, MessageLedger, RoutingMode, SimParams, TokenTrace,
};
use crate::error::{Error, Result};
use crate::gating::balance_loss;
use crate::math::{relu, Matrix};
use crate::moe::{capacity, MoeModel, TokenStatus};
use crate::rng::{domains, RandomStream};

pub const ADAM_EPS: f32 = 1e-8;

/// Evaluation token ids live far above any training id so the two sets of
/// per-token streams never collide.
const EVAL_ID_OFFSET: u64 = 1 << 40;

/// Optimization and regularization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// Per-iteration probability of dropping the all-to-all.
    pub p: f64,
    pub cf_train: f64,
    pub cf_eval: f64,
    /// Balancing-loss coefficient.
    pub alpha: f32,
    pub lr_base: f32,
    pub warmup: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub steps: u64,
    pub jitter_eps: f32,
}

impl HyperParams {
    /// Defaults per mode; only the drop probability differs (0.3 for
    /// gate_drop, 0.2 for gate_expert_drop, 0 for the never-drop modes).
    pub fn default_for(mode: RoutingMode) -> Self {
        Self {
            p: match mode {
                RoutingMode::GateDrop => 0.3,
                RoutingMode::GateExpertDrop => 0.2,
                RoutingMode::Baseline | RoutingMode::Hash => 0.0,
            },
            cf_train: 1.0,
            cf_eval: 2.0,
            alpha: 0.01,
            lr_base: 0.03,
            warmup: 5000,
            beta1: 0.9,
            beta2: 0.99,
            steps: 100,
            jitter_eps: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("p must lie in [0, 1], got {}", self.p)));
        }
        for (name, v) in [("cf_train", self.cf_train), ("cf_eval", self.cf_eval)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lr_base must be positive, got {}",
                self.lr_base
            )));
        }
        if self.warmup == 0 {
            return Err(Error::InvalidConfig("warmup must be >= 1".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.jitter_eps >= 0.0 && self.jitter_eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "jitter_eps must be >= 0, got {}",
                self.jitter_eps
            )));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule: linear ramp to `lr_base` over `warmup`
/// steps, then `lr_base * sqrt(warmup / t)`. Steps are 1-based.
pub fn lr_at(t: u64, hp: &HyperParams) -> Result<f32> {
    if t == 0 {
        return Err(Error::InvalidInput("learning-rate schedule starts at step 1".into()));
    }
    let lr = if t < hp.warmup {
        hp.lr_base as f64 * t as f64 / hp.warmup as f64
    } else {
        hp.lr_base as f64 * (hp.warmup as f64 / t as f64).sqrt()
    };
    Ok(lr as f32)
}

/// Adam first and second moments, one pair of buffers per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    t: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(tensor_sizes: &[usize]) -> Self {
        Self {
            t: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            m: tensor_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: tensor_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over parallel tensor lists.
pub fn adam_step(
    params: &mut [&mut [f32]],
    grads: &[&[f32]],
    state: &mut AdamState,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ContractViolation(format!(
            "{} parameter tensors, {} gradient tensors, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    state.beta1_pow *= beta1 as f64;
    state.beta2_pow *= beta2 as f64;
    let bc1 = (1.0 - state.beta1_pow) as f32;
    let bc2 = (1.0 - state.beta2_pow) as f32;
    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        if param.len() != grad.len() || param.len() != state.m[i].len() {
            return Err(Error::ContractViolation(format!(
                "tensor {i}: {} parameters, {} gradients, {} moments",
                param.len(),
                grad.len(),
                state.m[i].len()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (p, &g)) in param.iter_mut().zip(grad.iter()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Clustered regression data, regenerable exactly from its seed: tokens
/// are drawn around per-cluster means and the target of a token is its
/// cluster's linear map applied to it.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    seed: u64,
    clusters: usize,
    dim: usize,
    noise_scale: f32,
    means: Vec<Vec<f32>>,
    maps: Vec<Matrix>,
}

impl SyntheticTask {
    pub fn new(seed: u64, clusters: usize, dim: usize, noise_scale: f32) -> Result<Self> {
        if clusters == 0 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "task needs clusters >= 1 and dim >= 1, got {clusters} and {dim}"
            )));
        }
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_scale must be >= 0, got {noise_scale}"
            )));
        }
        let map_bound = (3.0 / dim as f32).sqrt();
        let means = (0..clusters)
            .map(|c| {
                let mut rng = RandomStream::for_stream(seed, domains::TASK_DATA, 2 * c as u64);
                (0..dim).map(|_| rng.uniform_range_f32(-1.0, 1.0)).collect()
            })
            .collect();
        let maps = (0..clusters)
            .map(|c| {
                let mut rng = RandomStream::for_stream(seed, domains::TASK_DATA, 2 * c as u64 + 1);
                Matrix::random_uniform(dim, dim, -map_bound, map_bound, &mut rng)
            })
            .collect();
        Ok(Self { seed, clusters, dim, noise_scale, means, maps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The (token, target) pair for a stable token id. The first draw of
    /// the token's stream picks its cluster, the rest perturb the mean.
    pub fn sample(&self, id: u64) -> (Vec<f32>, Vec<f32>) {
        let mut rng = RandomStream::for_stream(self.seed, domains::BATCH_DATA, id);
        let c = ((rng.uniform() * self.clusters as f64) as usize).min(self.clusters - 1);
        let x: Vec<f32> = self.means[c]
            .iter()
            .map(|&m| m + self.noise_scale * rng.normal_f32())
            .collect();
        let target = self.maps[c].matvec(&x).expect("cluster map matches task dim");
        (x, target)
    }

    pub fn batch(&self, ids: &[u64]) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        ids.iter().map(|&id| self.sample(id)).unzip()
    }
}

/// The trainable model: one MoE layer followed by a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainModel {
    pub moe: MoeModel,
    pub head: Matrix,
}

impl TrainModel {
    pub fn random(seed: u64, d: usize, d_ff: usize, n: usize) -> Result<Self> {
        let moe = MoeModel::random(seed, d, d_ff, n)?;
        let bound = (1.0 / d as f32).sqrt();
        let mut rng =
            RandomStream::for_stream(seed, domains::MODEL_INIT, 1 + 2 * n as u64);
        let head = Matrix::random_uniform(d, d, -bound, bound, &mut rng);
        Ok(Self { moe, head })
    }

    pub fn dim(&self) -> usize {
        self.moe.dim()
    }

    /// Trainable tensors in a fixed order: router, then each expert's two
    /// layers, then the head. Gradients use the same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(2 + 2 * self.moe.experts.len());
        out.push(self.moe.gating.w_r.as_mut_slice());
        for e in &mut self.moe.experts {
            out.push(e.w1.as_mut_slice());
            out.push(e.w2.as_mut_slice());
        }
        out.push(self.head.as_mut_slice());
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 + 2 * self.moe.experts.len());
        out.push(self.moe.gating.w_r.as_slice().len());
        for e in &self.moe.experts {
            out.push(e.w1.as_slice().len());
            out.push(e.w2.as_slice().len());
        }
        out.push(self.head.as_slice().len());
        out
    }
}

/// Gradient tensors mirroring [`TrainModel`]'s layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_r: Matrix,
    pub experts: Vec<(Matrix, Matrix)>,
    pub head: Matrix,
}

impl Gradients {
    pub fn zeros_like(model: &TrainModel) -> Self {
        Self {
            w_r: Matrix::zeros(model.moe.gating.w_r.rows(), model.moe.gating.w_r.cols()),
            experts: model
                .moe
                .experts
                .iter()
                .map(|e| {
                    (
                        Matrix::zeros(e.w1.rows(), e.w1.cols()),
                        Matrix::zeros(e.w2.rows(), e.w2.cols()),
                    )
                })
                .collect(),
            head: Matrix::zeros(model.head.rows(), model.head.cols()),
        }
    }

    /// Flat view in [`TrainModel::tensors_mut`] order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(2 + 2 * self.experts.len());
        out.push(self.w_r.as_slice());
        for (w1, w2) in &self.experts {
            out.push(w1.as_slice());
            out.push(w2.as_slice());
        }
        out.push(self.head.as_slice());
        out
    }
}

/// Loss values and gradients for one step.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f32,
    pub task: f32,
    pub balance: f32,
    /// Fraction of tokens assigned to each expert, counted before the
    /// capacity cut. All zero when the layer was skipped.
    pub assign_fractions: Vec<f32>,
    pub grads: Gradients,
}

/// Loss and manual reverse-mode gradients over one iteration's trace.
///
/// Task loss is the mean squared error of the head applied to the layer
/// outputs, averaged over tokens and coordinates. Expert gradients flow
/// only to routed tokens' experts, scaled by the gate probability; router
/// gradients flow through the selected coordinate of the softmax plus the
/// balancing term; bypassed tokens contribute only through the head.
pub fn loss_and_grads(
    model: &TrainModel,
    trace: &[TokenTrace],
    targets: &[Vec<f32>],
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    if trace.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} traced tokens against {} targets",
            trace.len(),
            targets.len()
        )));
    }
    let d = model.dim();
    let n = model.moe.num_experts();
    let t_count = trace.len();
    let mut grads = Gradients::zeros_like(model);
    if t_count == 0 {
        return Ok(LossBreakdown {
            total: 0.0,
            task: 0.0,
            balance: 0.0,
            assign_fractions: vec![0.0; n],
            grads,
        });
    }

    // Assignment fractions and mean probabilities over gated tokens.
    let mut assign_counts = vec![0u64; n];
    let mut prob_sums = vec![0.0f64; n];
    let mut gated = 0u64;
    for tok in trace {
        if let Some(e) = tok.expert {
            assign_counts[e] += 1;
        }
        if let Some(probs) = &tok.probs {
            gated += 1;
            for (s, &p) in prob_sums.iter_mut().zip(probs) {
                *s += p as f64;
            }
        }
    }
    let assigned: u64 = assign_counts.iter().sum();
    let assign_fractions: Vec<f32> = assign_counts
        .iter()
        .map(|&c| if assigned == 0 { 0.0 } else { c as f32 / assigned as f32 })
        .collect();

    let balance = if gated > 0 && hp.alpha > 0.0 {
        let mean_probs: Vec<f32> =
            prob_sums.iter().map(|&s| (s / gated as f64) as f32).collect();
        balance_loss(&assign_fractions, &mean_probs, hp.alpha)?
    } else {
        0.0
    };
    // d(balance)/d(probs[j]) per gated token, detached assignment counts.
    let balance_dp: Vec<f32> = assign_fractions
        .iter()
        .map(|&f| if gated > 0 { hp.alpha * n as f32 * f / gated as f32 } else { 0.0 })
        .collect();

    let inv_td = 1.0 / (t_count as f32 * d as f32);
    let mut task_sum = 0.0f64;
    for (tok, target) in trace.iter().zip(targets) {
        if target.len() != d {
            return Err(Error::InvalidInput(format!(
                "target of dimension {} in a dimension-{d} model",
                target.len()
            )));
        }
        let pred = model.head.matvec(&tok.output)?;
        let diff: Vec<f32> = pred.iter().zip(target).map(|(&a, &b)| a - b).collect();
        task_sum += diff.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();

        let dpred: Vec<f32> = diff.iter().map(|&v| 2.0 * inv_td * v).collect();
        grads.head.add_outer(&dpred, &tok.output)?;
        let dy = model.head.matvec_t(&dpred)?;

        // Straight-through task gradient into the selected coordinate.
        let mut dp_task = 0.0f32;
        if tok.status == TokenStatus::Routed {
            let e = tok.expert.ok_or_else(|| {
                Error::ContractViolation("routed token without an expert in trace".into())
            })?;
            let g = tok.gate_prob.unwrap_or(1.0);
            let expert = &model.moe.experts[e];
            let h1 = expert.w1.matvec(&tok.input)?;
            let a = relu(&h1);
            let e_out = expert.w2.matvec(&a)?;
            dp_task = dy.iter().zip(&e_out).map(|(&u, &v)| u * v).sum();
            let de: Vec<f32> = dy.iter().map(|&v| g * v).collect();
            let (gw1, gw2) = &mut grads.experts[e];
            gw2.add_outer(&de, &a)?;
            let da = expert.w2.matvec_t(&de)?;
            let dh1: Vec<f32> =
                da.iter().zip(&h1).map(|(&v, &h)| if h > 0.0 { v } else { 0.0 }).collect();
            gw1.add_outer(&dh1, &tok.input)?;
        }

        if let Some(probs) = &tok.probs {
            let mut dp = balance_dp.clone();
            if tok.status == TokenStatus::Routed {
                dp[tok.expert.unwrap()] += dp_task;
            }
            let inner: f32 = dp.iter().zip(probs).map(|(&a, &b)| a * b).sum();
            let dz: Vec<f32> =
                dp.iter().zip(probs).map(|(&dpj, &pj)| pj * (dpj - inner)).collect();
            let gate_input = tok.gate_input.as_ref().ok_or_else(|| {
                Error::ContractViolation("gated token without a gate input in trace".into())
            })?;
            grads.w_r.add_outer(&dz, gate_input)?;
        }
    }

    let task = (task_sum / (t_count as f64 * d as f64)) as f32;
    Ok(LossBreakdown { total: task + balance, task, balance, assign_fractions, grads })
}

/// Natural-log entropy of an assignment distribution; 0 when no tokens
/// were assigned.
pub fn expert_entropy(fractions: &[f32]) -> f32 {
    let h: f64 = fractions
        .iter()
        .filter(|&&f| f > 0.0)
        .map(|&f| -(f as f64) * (f as f64).ln())
        .sum();
    h as f32
}

/// Full training-run description.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub d: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub m_workers: usize,
    pub tokens_per_step: usize,
    pub eval_tokens: usize,
    pub noise_scale: f32,
    pub mode: RoutingMode,
    pub hp: HyperParams,
    pub enforce_capacity_on_drop: bool,
}

impl TrainConfig {
    pub fn desk_default(mode: RoutingMode) -> Self {
        Self {
            seed: 42,
            d: 8,
            d_ff: 32,
            n_experts: 8,
            m_workers: 4,
            tokens_per_step: 64,
            eval_tokens: 64,
            noise_scale: 0.3,
            mode,
            hp: HyperParams::default_for(mode),
            enforce_capacity_on_drop: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("n_experts", self.n_experts),
            ("m_workers", self.m_workers),
            ("tokens_per_step", self.tokens_per_step),
            ("eval_tokens", self.eval_tokens),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.n_experts % self.m_workers != 0 {
            return Err(Error::InvalidConfig(format!(
                "worker count {} does not divide expert count {}",
                self.m_workers, self.n_experts
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_scale must be >= 0, got {}",
                self.noise_scale
            )));
        }
        self.hp.validate()
    }

    fn sim_params(&self, jitter_eps: f32) -> SimParams {
        SimParams {
            seed: self.seed,
            jitter_eps,
            enforce_capacity_on_drop: self.enforce_capacity_on_drop,
        }
    }
}

/// Everything recorded about one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f32,
    pub balance: f32,
    pub drop_on: bool,
    /// All ledger bytes of the step: token traffic plus the broadcast.
    pub comm_bytes: u64,
    pub lr: f32,
    pub expert_entropy: f32,
}

/// Per-step metrics plus the bracketing evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepMetrics>,
    pub initial_eval_loss: f32,
    pub final_eval_loss: f32,
    /// Fraction of steps whose all-to-all was dropped.
    pub on_fraction: f64,
}

/// Mean squared error of the model on a held-out deterministic batch.
/// Evaluation never drops, never jitters, and uses the eval capacity
/// factor, so it is independent of every training-time setting.
pub fn evaluate(model: &TrainModel, task: &SyntheticTask, cfg: &TrainConfig) -> Result<f32> {
    let topo = place_experts(cfg.n_experts, cfg.m_workers)?;
    let ids: Vec<u64> = (0..cfg.eval_tokens as u64).map(|i| EVAL_ID_OFFSET + i).collect();
    let (tokens, targets) = task.batch(&ids);
    let batches = partition_tokens(&ids, &tokens, cfg.m_workers)?;
    let decision = IterationDecision { iteration: 0, drop_on: false, mode: cfg.mode };
    let cap = capacity(cfg.eval_tokens, cfg.n_experts, cfg.hp.cf_eval);
    let mut ledger = MessageLedger::new();
    let out = moe_iteration(
        &batches,
        &model.moe,
        &topo,
        &decision,
        cap,
        &cfg.sim_params(0.0),
        &mut ledger,
    )?;
    let d = model.dim();
    let mut sum = 0.0f64;
    for (tok, target) in out.trace.iter().zip(&targets) {
        let pred = model.head.matvec(&tok.output)?;
        sum += pred
            .iter()
            .zip(target)
            .map(|(&a, &b)| ((a - b) as f64) * ((a - b) as f64))
            .sum::<f64>();
    }
    Ok((sum / (cfg.eval_tokens as f64 * d as f64)) as f32)
}

/// Runs the full loop: decide, broadcast, route, differentiate, step.
pub fn train(cfg: &TrainConfig) -> Result<MetricsLog> {
    cfg.validate()?;
    let task = SyntheticTask::new(cfg.seed, cfg.n_experts, cfg.d, cfg.noise_scale)?;
    let mut model = TrainModel::random(cfg.seed, cfg.d, cfg.d_ff, cfg.n_experts)?;
    let topo = place_experts(cfg.n_experts, cfg.m_workers)?;
    let mut coord_rng = RandomStream::for_stream(cfg.seed, domains::COORDINATOR, 0);
    let mut adam = AdamState::new(&model.tensor_sizes());
    let sim = cfg.sim_params(cfg.hp.jitter_eps);
    let cap = capacity(cfg.tokens_per_step, cfg.n_experts, cfg.hp.cf_train);

    let initial_eval_loss = evaluate(&model, &task, cfg)?;
    let mut steps = Vec::with_capacity(cfg.hp.steps as usize);
    let mut drops = 0u64;
    for step in 1..=cfg.hp.steps {
        let iteration = step - 1;
        let ids: Vec<u64> = (0..cfg.tokens_per_step as u64)
            .map(|i| iteration * cfg.tokens_per_step as u64 + i)
            .collect();
        let (tokens, targets) = task.batch(&ids);
        let batches = partition_tokens(&ids, &tokens, cfg.m_workers)?;

        let mut ledger = MessageLedger::new();
        let decision = coordinator_decide(iteration, cfg.mode, cfg.hp.p, &mut coord_rng)?;
        broadcast_decision(decision, &topo, &mut ledger);
        let out = moe_iteration(&batches, &model.moe, &topo, &decision, cap, &sim, &mut ledger)?;

        let lb = loss_and_grads(&model, &out.trace, &targets, &cfg.hp)?;
        let lr = lr_at(step, &cfg.hp)?;
        let grad_tensors = lb.grads.tensors();
        adam_step(
            &mut model.tensors_mut(),
            &grad_tensors,
            &mut adam,
            lr,
            cfg.hp.beta1,
            cfg.hp.beta2,
            ADAM_EPS,
        )?;

        drops += u64::from(decision.drop_on);
        steps.push(StepMetrics {
            step,
            loss: lb.total,
            balance: lb.balance,
            drop_on: decision.drop_on,
            comm_bytes: ledger.total_bytes(),
            lr,
            expert_entropy: expert_entropy(&lb.assign_fractions),
        });
    }
    let final_eval_loss = evaluate(&model, &task, cfg)?;
    let on_fraction = if cfg.hp.steps == 0 { 0.0 } else { drops as f64 / cfg.hp.steps as f64 };
    Ok(MetricsLog { steps, initial_eval_loss, final_eval_loss, on_fraction })
}
