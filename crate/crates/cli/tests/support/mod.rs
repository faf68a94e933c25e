//! Brute-force double-precision reference used by the acceptance suite.
//!
//! Everything here recomputes results from scratch over plain vectors:
//! its own bit mixer, its own stream addressing, its own gating, capacity
//! accounting, and loss arithmetic. It shares no code path with the
//! library beyond reading weights out of matrices as numbers, so
//! agreement between the two implementations is evidence, not tautology.

use gatedrop_core::{Matrix, MoeModel, TrainModel};

/// Stream domain tag for per-token jitter, matching the library contract
/// that the jitter stream of token `id` is (seed, jitter domain, id).
pub const JITTER_DOMAIN: u64 = 0x02;

/// SplitMix64-style finalizer, written out again from its constants.
pub fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based stream addressed by (seed, domain, index), mirroring the
/// library's addressing scheme value for value.
pub struct Stream {
    seed: u64,
    id: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, domain: u64, index: u64) -> Self {
        Self { seed, id: mix(domain).wrapping_add(index), counter: 0 }
    }

    pub fn next(&mut self) -> u64 {
        let h = mix(self.seed.wrapping_add(mix(self.id.wrapping_add(mix(self.counter)))));
        self.counter += 1;
        h
    }

    /// Uniform in [0, 1) from the 53 high bits.
    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi) rounded through f32 the same way the library
    /// rounds it, so draw values agree bit for bit.
    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * (self.unit() as f32)
    }
}

/// Expert index for a token id: multiply-shift of the mixed id onto [0, n).
pub fn hash_expert(id: u64, n: usize) -> usize {
    ((mix(id) as u128 * n as u128) >> 64) as usize
}

fn grid(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Double-precision copy of the trainable tensors, in the library's
/// tensor order: router, each expert's two layers, head.
#[derive(Clone)]
pub struct RefModel {
    pub w_r: Vec<Vec<f64>>,
    pub experts: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    pub head: Option<Vec<Vec<f64>>>,
}

impl RefModel {
    pub fn from_train_model(m: &TrainModel) -> Self {
        let mut s = Self::from_moe_model(&m.moe);
        s.head = Some(grid(&m.head));
        s
    }

    pub fn from_moe_model(m: &MoeModel) -> Self {
        Self {
            w_r: grid(&m.gating.w_r),
            experts: m.experts.iter().map(|e| (grid(&e.w1), grid(&e.w2))).collect(),
            head: None,
        }
    }

    /// Flat tensor count in library order (head included when present).
    pub fn tensor_count(&self) -> usize {
        1 + 2 * self.experts.len() + usize::from(self.head.is_some())
    }

    pub fn tensor_len(&self, t: usize) -> usize {
        let g = self.tensor_ref(t);
        g.len() * g[0].len()
    }

    fn tensor_ref(&self, t: usize) -> &Vec<Vec<f64>> {
        if t == 0 {
            &self.w_r
        } else if t <= 2 * self.experts.len() {
            let e = (t - 1) / 2;
            if (t - 1) % 2 == 0 {
                &self.experts[e].0
            } else {
                &self.experts[e].1
            }
        } else {
            self.head.as_ref().expect("tensor index names the missing head")
        }
    }

    fn tensor_mut(&mut self, t: usize) -> &mut Vec<Vec<f64>> {
        if t == 0 {
            &mut self.w_r
        } else if t <= 2 * self.experts.len() {
            let e = (t - 1) / 2;
            if (t - 1) % 2 == 0 {
                &mut self.experts[e].0
            } else {
                &mut self.experts[e].1
            }
        } else {
            self.head.as_mut().expect("tensor index names the missing head")
        }
    }

    /// Copy with entry `index` (row-major) of tensor `t` shifted by
    /// `delta`, for central differences.
    pub fn perturbed(&self, t: usize, index: usize, delta: f64) -> Self {
        let mut out = self.clone();
        let g = out.tensor_mut(t);
        let cols = g[0].len();
        g[index / cols][index % cols] += delta;
        out
    }
}

/// One evaluation scenario: which tokens sit where, how gating behaves,
/// and what the capacity cut is.
pub struct RefCase {
    pub seed: u64,
    pub jitter_eps: f32,
    pub workers: usize,
    pub cap: usize,
    /// Route by hashed token id instead of the learned gate.
    pub hash: bool,
    /// The layer is skipped outright (gate_expert_drop, drop on).
    pub skip_layer: bool,
    /// Gating is restricted to each token's own worker (gate_drop, drop on).
    pub local_only: bool,
    pub alpha: f32,
    pub ids: Vec<u64>,
    pub tokens: Vec<Vec<f64>>,
}

/// Everything the reference forward pass produces, plus the distances to
/// the nearest decision boundaries. Finite-difference checks only make
/// sense while no argmax or rectifier flips inside the probe interval,
/// and the margins let callers assert that.
pub struct RefForward {
    pub outputs: Vec<Vec<f64>>,
    /// Pre-capacity expert assignment; None when the layer was skipped.
    pub assigned: Vec<Option<usize>>,
    pub routed: Vec<bool>,
    pub probs: Vec<Option<Vec<f64>>>,
    pub min_argmax_gap: f64,
    pub min_relu_distance: f64,
}

/// Worker owning global token `g` under the contiguous split where the
/// first `t % m` workers hold one extra token.
pub fn worker_of_token(g: usize, t: usize, m: usize) -> usize {
    let base = t / m;
    let extra = t % m;
    let big = extra * (base + 1);
    if g < big {
        g / (base + 1)
    } else {
        extra + (g - big) / base
    }
}

/// Full single-process forward pass over the global batch.
pub fn forward(model: &RefModel, case: &RefCase) -> RefForward {
    let t = case.tokens.len();
    let n = model.experts.len();
    if case.skip_layer {
        return RefForward {
            outputs: case.tokens.clone(),
            assigned: vec![None; t],
            routed: vec![false; t],
            probs: vec![None; t],
            min_argmax_gap: f64::INFINITY,
            min_relu_distance: f64::INFINITY,
        };
    }

    let epw = n / case.workers;
    let mut assigned = Vec::with_capacity(t);
    let mut gates = Vec::with_capacity(t);
    let mut probs_out: Vec<Option<Vec<f64>>> = Vec::with_capacity(t);
    let mut min_gap = f64::INFINITY;

    for (g, (id, x)) in case.ids.iter().zip(&case.tokens).enumerate() {
        if case.hash {
            assigned.push(Some(hash_expert(*id, n)));
            gates.push(1.0f64);
            probs_out.push(None);
            continue;
        }
        let jittered: Vec<f64> = if case.jitter_eps == 0.0 {
            x.clone()
        } else {
            let mut s = Stream::new(case.seed, JITTER_DOMAIN, *id);
            x.iter()
                .map(|&v| {
                    v * s.range_f32(1.0 - case.jitter_eps, 1.0 + case.jitter_eps) as f64
                })
                .collect()
        };
        let probs = softmax(&matvec(&model.w_r, &jittered));
        let worker = worker_of_token(g, t, case.workers);
        let allowed =
            |e: usize| !case.local_only || e / epw == worker;
        let mut best = usize::MAX;
        for e in 0..n {
            if allowed(e) && (best == usize::MAX || probs[e] > probs[best]) {
                best = e;
            }
        }
        let runner_up = (0..n)
            .filter(|&e| allowed(e) && e != best)
            .map(|e| probs[e])
            .fold(f64::NEG_INFINITY, f64::max);
        if runner_up.is_finite() {
            min_gap = min_gap.min(probs[best] - runner_up);
        }
        assigned.push(Some(best));
        gates.push(probs[best]);
        probs_out.push(Some(probs));
    }

    // First-come-first-served capacity cut in global order.
    let mut filled = vec![0usize; n];
    let routed: Vec<bool> = assigned
        .iter()
        .map(|a| {
            let e = a.expect("assignment exists unless the layer was skipped");
            if filled[e] < case.cap {
                filled[e] += 1;
                true
            } else {
                false
            }
        })
        .collect();

    let mut min_relu = f64::INFINITY;
    let outputs = case
        .tokens
        .iter()
        .enumerate()
        .map(|(g, x)| {
            if !routed[g] {
                return x.clone();
            }
            let (w1, w2) = &model.experts[assigned[g].unwrap()];
            let h1 = matvec(w1, x);
            for &h in &h1 {
                min_relu = min_relu.min(h.abs());
            }
            let a: Vec<f64> = h1.iter().map(|&h| h.max(0.0)).collect();
            matvec(w2, &a).iter().map(|&v| gates[g] * v).collect()
        })
        .collect();

    RefForward {
        outputs,
        assigned,
        routed,
        probs: probs_out,
        min_argmax_gap: min_gap,
        min_relu_distance: min_relu,
    }
}

/// Total training loss of the case: mean squared error of the head on
/// the layer outputs plus the assignment-balance penalty.
pub fn loss(model: &RefModel, case: &RefCase, targets: &[Vec<f64>]) -> f64 {
    let head = model.head.as_ref().expect("loss needs the head tensor");
    let fwd = forward(model, case);
    let t = case.tokens.len();
    let d = case.tokens[0].len();
    let n = model.experts.len();

    let mut task = 0.0f64;
    for (y, target) in fwd.outputs.iter().zip(targets) {
        let pred = matvec(head, y);
        task += pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    task /= (t * d) as f64;

    let mut counts = vec![0u64; n];
    let mut prob_sums = vec![0.0f64; n];
    let mut gated = 0u64;
    for g in 0..t {
        if let Some(e) = fwd.assigned[g] {
            counts[e] += 1;
        }
        if let Some(p) = &fwd.probs[g] {
            gated += 1;
            for (s, &v) in prob_sums.iter_mut().zip(p) {
                *s += v;
            }
        }
    }
    let total_assigned: u64 = counts.iter().sum();
    let balance = if gated > 0 && case.alpha > 0.0 && total_assigned > 0 {
        let dot: f64 = counts
            .iter()
            .zip(&prob_sums)
            .map(|(&c, &s)| (c as f64 / total_assigned as f64) * (s / gated as f64))
            .sum();
        case.alpha as f64 * n as f64 * dot
    } else {
        0.0
    };
    task + balance
}
