//! Flat key=value configuration with flag overrides.
//!
//! One `key=value` pair per line, `#` starts a comment. Every key can also
//! be given as a `--key value` (or `--key=value`) flag; flags override the
//! file. Unknown keys, malformed values, and constraint violations are
//! config errors that name the offending key.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use gatedrop_core::cost::CostParams;
use gatedrop_core::trainer::{HyperParams, TrainConfig};
use gatedrop_core::RoutingMode;

use crate::CliError;

/// Which subcommand to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Train,
    Sweep,
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "simulate" => Ok(Command::Simulate),
            "train" => Ok(Command::Train),
            "sweep" => Ok(Command::Sweep),
            other => Err(format!(
                "unknown command '{other}' (expected simulate, train, or sweep)"
            )),
        }
    }
}

/// Every accepted configuration key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "d",
    "d_ff",
    "N",
    "M",
    "B",
    "L",
    "mode",
    "p",
    "cf_train",
    "cf_eval",
    "alpha",
    "jitter_eps",
    "lr_base",
    "warmup",
    "beta1",
    "beta2",
    "steps",
    "moe_layers",
    "passes_per_step",
    "link_bandwidth",
    "per_message_latency",
    "compute_time_per_token",
    "output_path",
];

/// A fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub d: usize,
    pub d_ff: usize,
    pub n: usize,
    pub m: usize,
    pub b: usize,
    pub l: usize,
    pub mode: RoutingMode,
    pub p: f64,
    pub cf_train: f64,
    pub cf_eval: f64,
    pub alpha: f32,
    pub jitter_eps: f32,
    pub lr_base: f32,
    pub warmup: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub steps: u64,
    pub moe_layers: usize,
    pub passes_per_step: usize,
    pub link_bandwidth: f64,
    pub per_message_latency: f64,
    pub compute_time_per_token: f64,
    pub output_path: Option<PathBuf>,
}

impl RunConfig {
    /// Tokens per step: the B x L global batch.
    pub fn step_tokens(&self) -> usize {
        self.b * self.l
    }

    /// Training view of the configuration.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            d: self.d,
            d_ff: self.d_ff,
            n_experts: self.n,
            m_workers: self.m,
            tokens_per_step: self.step_tokens(),
            eval_tokens: self.step_tokens(),
            noise_scale: 0.3,
            mode: self.mode,
            hp: HyperParams {
                p: self.p,
                cf_train: self.cf_train,
                cf_eval: self.cf_eval,
                alpha: self.alpha,
                lr_base: self.lr_base,
                warmup: self.warmup,
                beta1: self.beta1,
                beta2: self.beta2,
                steps: self.steps,
                jitter_eps: self.jitter_eps,
            },
            enforce_capacity_on_drop: true,
        }
    }

    /// Cost-model view. Half of the model's layers are MoE sub-layers, so
    /// the dense remainder equals `moe_layers`.
    pub fn cost_params(&self) -> CostParams {
        CostParams {
            batch: self.b,
            seq_len: self.l,
            d_model: self.d,
            workers: self.m,
            moe_layers: self.moe_layers,
            total_layers: 2 * self.moe_layers,
            passes_per_step: self.passes_per_step,
            link_bandwidth: self.link_bandwidth,
            per_message_latency: self.per_message_latency,
            compute_time_per_token_per_layer: self.compute_time_per_token,
        }
    }
}

fn config_err(msg: String) -> CliError {
    CliError::Config(msg)
}

/// Splits raw CLI arguments into the command, an optional config path, and
/// override pairs, then builds the validated config.
pub fn parse_args(args: &[String]) -> Result<(Command, RunConfig), CliError> {
    let mut command: Option<Command> = None;
    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();

    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(config_err(format!(
                "unexpected argument '{arg}' (flags look like --key value)"
            )));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                i += 1;
                let Some(v) = args.get(i) else {
                    return Err(config_err(format!("flag --{flag} is missing its value")));
                };
                (flag.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "command" => {
                command = Some(value.parse().map_err(config_err)?);
            }
            "config" => {
                config_path = Some(PathBuf::from(value));
            }
            _ => overrides.push((key, value)),
        }
        i += 1;
    }

    let Some(command) = command else {
        return Err(config_err(
            "missing --command (expected simulate, train, or sweep)".into(),
        ));
    };

    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &config_path {
        let text = std::fs::read_to_string(path).map_err(|e| {
            config_err(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(config_err(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            insert_pair(&mut pairs, k.trim(), v.trim())?;
        }
    }
    for (k, v) in &overrides {
        insert_pair(&mut pairs, k, v)?;
    }

    let cfg = build(&pairs)?;
    Ok((command, cfg))
}

fn insert_pair(
    pairs: &mut BTreeMap<String, String>,
    key: &str,
    value: &str,
) -> Result<(), CliError> {
    if !KEYS.contains(&key) {
        return Err(config_err(format!("unknown key '{key}'")));
    }
    pairs.insert(key.to_string(), value.to_string());
    Ok(())
}

fn build(pairs: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    let mode = match pairs.get("mode") {
        Some(v) => v
            .parse::<RoutingMode>()
            .map_err(|e| config_err(format!("invalid value for mode: {e}")))?,
        None => RoutingMode::Baseline,
    };
    let defaults = HyperParams::default_for(mode);

    let mut cfg = RunConfig {
        seed: 42,
        d: 8,
        d_ff: 32,
        n: 8,
        m: 4,
        b: 4,
        l: 16,
        mode,
        p: defaults.p,
        cf_train: defaults.cf_train,
        cf_eval: defaults.cf_eval,
        alpha: defaults.alpha,
        jitter_eps: defaults.jitter_eps,
        lr_base: defaults.lr_base,
        warmup: defaults.warmup,
        beta1: defaults.beta1,
        beta2: defaults.beta2,
        steps: 100,
        moe_layers: 6,
        passes_per_step: 2,
        link_bandwidth: 12.5e9,
        per_message_latency: 5e-6,
        compute_time_per_token: 2e-6,
        output_path: None,
    };

    for (key, value) in pairs {
        match key.as_str() {
            "mode" => {} // applied above so p can default per mode
            "seed" => cfg.seed = parse_u64(key, value)?,
            "d" => cfg.d = parse_count(key, value)?,
            "d_ff" => cfg.d_ff = parse_count(key, value)?,
            "N" => cfg.n = parse_count(key, value)?,
            "M" => cfg.m = parse_count(key, value)?,
            "B" => cfg.b = parse_count(key, value)?,
            "L" => cfg.l = parse_count(key, value)?,
            "p" => cfg.p = parse_f64_in(key, value, 0.0, 1.0)?,
            "cf_train" => cfg.cf_train = parse_positive_f64(key, value)?,
            "cf_eval" => cfg.cf_eval = parse_positive_f64(key, value)?,
            "alpha" => cfg.alpha = parse_nonnegative_f64(key, value)? as f32,
            "jitter_eps" => cfg.jitter_eps = parse_nonnegative_f64(key, value)? as f32,
            "lr_base" => cfg.lr_base = parse_positive_f64(key, value)? as f32,
            "warmup" => {
                cfg.warmup = parse_u64(key, value)?;
                if cfg.warmup == 0 {
                    return Err(config_err("warmup must be >= 1".into()));
                }
            }
            "beta1" => cfg.beta1 = parse_f64_in(key, value, 0.0, 1.0 - f64::EPSILON)? as f32,
            "beta2" => cfg.beta2 = parse_f64_in(key, value, 0.0, 1.0 - f64::EPSILON)? as f32,
            "steps" => cfg.steps = parse_u64(key, value)?,
            "moe_layers" => cfg.moe_layers = parse_count(key, value)?,
            "passes_per_step" => cfg.passes_per_step = parse_count(key, value)?,
            "link_bandwidth" => cfg.link_bandwidth = parse_positive_f64(key, value)?,
            "per_message_latency" => cfg.per_message_latency = parse_nonnegative_f64(key, value)?,
            "compute_time_per_token" => {
                cfg.compute_time_per_token = parse_positive_f64(key, value)?
            }
            "output_path" => cfg.output_path = Some(PathBuf::from(value)),
            other => return Err(config_err(format!("unknown key '{other}'"))),
        }
    }

    if cfg.n % cfg.m != 0 {
        return Err(config_err(format!(
            "M={} does not divide N={}; every worker needs the same expert count",
            cfg.m, cfg.n
        )));
    }
    Ok(cfg)
}

fn parse_u64(key: &str, value: &str) -> Result<u64, CliError> {
    value
        .parse::<u64>()
        .map_err(|_| config_err(format!("invalid value for {key}: '{value}' is not a whole number")))
}

fn parse_count(key: &str, value: &str) -> Result<usize, CliError> {
    let v = value.parse::<usize>().map_err(|_| {
        config_err(format!("invalid value for {key}: '{value}' is not a whole number"))
    })?;
    if v == 0 {
        return Err(config_err(format!("{key} must be >= 1")));
    }
    Ok(v)
}

fn parse_f64(key: &str, value: &str) -> Result<f64, CliError> {
    let v = value
        .parse::<f64>()
        .map_err(|_| config_err(format!("invalid value for {key}: '{value}' is not a number")))?;
    if !v.is_finite() {
        return Err(config_err(format!("{key} must be finite, got {value}")));
    }
    Ok(v)
}

fn parse_f64_in(key: &str, value: &str, lo: f64, hi: f64) -> Result<f64, CliError> {
    let v = parse_f64(key, value)?;
    if !(lo..=hi).contains(&v) {
        return Err(config_err(format!("{key} must lie in [{lo}, {hi}], got {value}")));
    }
    Ok(v)
}

fn parse_positive_f64(key: &str, value: &str) -> Result<f64, CliError> {
    let v = parse_f64(key, value)?;
    if v <= 0.0 {
        return Err(config_err(format!("{key} must be positive, got {value}")));
    }
    Ok(v)
}

fn parse_nonnegative_f64(key: &str, value: &str) -> Result<f64, CliError> {
    let v = parse_f64(key, value)?;
    if v < 0.0 {
        return Err(config_err(format!("{key} must be >= 0, got {value}")));
    }
    Ok(v)
}
