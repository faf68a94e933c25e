//! The three subcommands and their CSV schemas.

use gatedrop_core::cost::{expected_step_comm_bytes, throughput_estimate, CostParams};
use gatedrop_core::rng::domains;
use gatedrop_core::trainer::SyntheticTask;
use gatedrop_core::{
    capacity, coordinator_decide, moe_iteration, partition_tokens, place_experts, MessageLedger,
    MoeModel, RandomStream, SimParams,
};

use crate::config::{parse_args, Command, RunConfig};
use crate::csv::{fmt_g6, write_output, Table};
use crate::CliError;

/// Worker counts for the scaling study.
const M_GRID: [usize; 5] = [8, 16, 32, 64, 128];
/// Drop probabilities for the sweep.
const P_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
/// Iterations measured per scaling-study point.
const SIMULATE_ITERATIONS: u64 = 200;

/// Parses, dispatches, and writes the resulting CSV.
pub fn run(args: &[String]) -> Result<(), CliError> {
    let (command, cfg) = parse_args(args)?;
    let text = match command {
        Command::Simulate => simulate(&cfg)?,
        Command::Train => train(&cfg)?,
        Command::Sweep => sweep(&cfg)?,
    };
    write_output(&text, cfg.output_path.as_deref())
}

/// Scaling study over the worker grid: cost-model predictions next to
/// ledger-measured bytes from a live simulation with one expert per
/// worker. Non-dropping modes collapse the probability grid to p=0.
fn simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let mut table = Table::new(vec![
        "M",
        "p",
        "mode",
        "predicted_tokens_per_sec",
        "measured_ledger_bytes",
        "predicted_bytes",
    ]);
    let mut p_values: Vec<f64> = [0.0, cfg.p, 1.0]
        .into_iter()
        .map(|p| if cfg.mode.can_drop() { p } else { 0.0 })
        .collect();
    p_values.sort_by(f64::total_cmp);
    p_values.dedup();

    for m in M_GRID {
        for &p in &p_values {
            let params = CostParams { workers: m, ..cfg.cost_params() };
            let report = throughput_estimate(&params, p, cfg.mode)?;
            let predicted_bytes = expected_step_comm_bytes(
                p,
                cfg.b,
                cfg.l,
                cfg.d,
                cfg.moe_layers,
                cfg.passes_per_step,
                m,
            );
            let measured = measured_mean_step_bytes(cfg, m, p)?;
            table.push(vec![
                m.to_string(),
                fmt_g6(p),
                cfg.mode.to_string(),
                fmt_g6(report.tokens_per_second),
                fmt_g6(measured),
                fmt_g6(predicted_bytes),
            ]);
        }
    }
    Ok(table.render())
}

/// Mean per-step token-traffic bytes over a seeded simulation with M
/// workers and M experts, scaled from the single simulated MoE layer to
/// the configured layer and pass counts.
fn measured_mean_step_bytes(cfg: &RunConfig, m: usize, p: f64) -> Result<f64, CliError> {
    let n = m;
    let model = MoeModel::random(cfg.seed, cfg.d, cfg.d_ff, n)?;
    let topo = place_experts(n, m)?;
    let task = SyntheticTask::new(cfg.seed, n, cfg.d, 0.3)?;
    let sim = SimParams::new(cfg.seed, cfg.jitter_eps);
    let tokens_per_step = cfg.step_tokens();
    let cap = capacity(tokens_per_step, n, cfg.cf_train);
    let mut coord = RandomStream::for_stream(cfg.seed, domains::COORDINATOR, 0);

    let mut total_bytes = 0.0f64;
    for it in 0..SIMULATE_ITERATIONS {
        let ids: Vec<u64> =
            (0..tokens_per_step as u64).map(|i| it * tokens_per_step as u64 + i).collect();
        let (tokens, _) = task.batch(&ids);
        let batches = partition_tokens(&ids, &tokens, m)?;
        let decision = coordinator_decide(it, cfg.mode, p, &mut coord)?;
        let mut ledger = MessageLedger::new();
        let out = moe_iteration(&batches, &model, &topo, &decision, cap, &sim, &mut ledger)?;
        total_bytes += out.comm.total_bytes() as f64;
    }
    Ok(total_bytes / SIMULATE_ITERATIONS as f64
        * cfg.moe_layers as f64
        * cfg.passes_per_step as f64)
}

/// Toy training run; one row per optimization step.
fn train(cfg: &RunConfig) -> Result<String, CliError> {
    let log = gatedrop_core::train(&cfg.train_config())?;
    let mut table = Table::new(vec![
        "step",
        "loss",
        "balance_loss",
        "drop_on",
        "comm_bytes",
        "lr",
        "expert_entropy",
    ]);
    for s in &log.steps {
        table.push(vec![
            s.step.to_string(),
            fmt_g6(s.loss as f64),
            fmt_g6(s.balance as f64),
            if s.drop_on { "1" } else { "0" }.to_string(),
            s.comm_bytes.to_string(),
            fmt_g6(s.lr as f64),
            fmt_g6(s.expert_entropy as f64),
        ]);
    }
    Ok(table.render())
}

/// Dropout-rate sweep: one summary row per p on the fixed grid, pairing
/// the cost model's throughput with a full training run at that rate.
fn sweep(cfg: &RunConfig) -> Result<String, CliError> {
    let mut table = Table::new(vec![
        "p",
        "mode",
        "predicted_tokens_per_sec",
        "mean_step_comm_bytes",
        "on_fraction",
        "final_train_loss",
        "final_eval_loss",
    ]);
    for p in P_GRID {
        let report = throughput_estimate(&cfg.cost_params(), p, cfg.mode)?;
        let mut tc = cfg.train_config();
        tc.hp.p = if cfg.mode.can_drop() { p } else { 0.0 };
        let log = gatedrop_core::train(&tc)?;
        let mean_bytes = if log.steps.is_empty() {
            0.0
        } else {
            log.steps.iter().map(|s| s.comm_bytes as f64).sum::<f64>() / log.steps.len() as f64
        };
        let final_train_loss = log.steps.last().map_or(f64::NAN, |s| s.loss as f64);
        table.push(vec![
            fmt_g6(p),
            cfg.mode.to_string(),
            fmt_g6(report.tokens_per_second),
            fmt_g6(mean_bytes),
            fmt_g6(log.on_fraction),
            fmt_g6(final_train_loss),
            fmt_g6(log.final_eval_loss as f64),
        ]);
    }
    Ok(table.render())
}
