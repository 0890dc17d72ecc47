//! Experiment configuration.
//!
//! A flat key = value text format (one pair per line, `#` comments) with
//! built-in defaults, overridable per key from the command line. Every run
//! is fully determined by (config, seed). Unknown keys are rejected so
//! typos fail loudly instead of silently running the defaults.

use crate::error::{Result, ShivaError};
use serde::{Deserialize, Serialize};

/// All experiment knobs. Field defaults carry the reference constants of
/// the synthetic experiments: a 100-token, 16-dim task with 20 signal
/// tokens of mean 10, budget initialized at 50, Adam lr 0.1 on the router,
/// SGD lr 2.0 on the budget, sparsity weight 0.1, a 100-step warmup and a
/// 700-step adaptation phase, and EMA momentum 0.2.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    /// Output directory; empty means the CLI default `out/<command>`.
    pub out_dir: String,
    // Synthetic task shape.
    pub n_tokens: usize,
    pub dim: usize,
    pub signal_count: usize,
    pub signal_mean: f64,
    // Budget dynamics.
    pub k_init: f64,
    pub lr_router: f64,
    pub lr_budget: f64,
    pub lambda: f64,
    pub warmup_steps: usize,
    pub adapt_steps: usize,
    // Temperatures and relaxation.
    pub tau_rank: f64,
    pub tau_sel: f64,
    pub normalized_selection: bool,
    /// Score perturbation: sigma = max(noise_floor, noise_rel * std(scores)).
    pub noise_rel: f64,
    pub noise_floor: f64,
    pub bottleneck: usize,
    // Monte Carlo style experiments.
    pub trials: usize,
    pub repetitions: usize,
    pub strata: usize,
    pub t_max: f64,
    pub gc_n: usize,
    pub gc_d: usize,
    pub gc_keep_fraction: f64,
    pub gc_rej_scale: f64,
    // Budget constraint.
    pub beta: f64,
    pub r_target: f64,
    /// Weight inside the proxy budget loss itself.
    pub lambda_budget: f64,
    pub lambda_b: f64,
    pub lambda_d: f64,
    // Toy three-stage training.
    pub n_layers: usize,
    pub hidden: usize,
    pub stack_tokens: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub ratio_groups: usize,
    pub batch_timesteps: usize,
    pub lr_policy: f64,
    /// Learning rate of the policy's scalar anchor (plain SGD); the
    /// anchor alone regulates the mean retention while the branches shape
    /// the schedule.
    pub lr_anchor: f64,
    pub lr_blocks: f64,
    pub logit_noise_std: f64,
    pub first_block_skip: bool,
    pub distill_every: usize,
    pub lut_steps: usize,
    pub stage1_stratified: bool,
    /// Scales toy-task input magnitude with the timestep: std(t) =
    /// 1 + time_difficulty * t / t_max.
    pub time_difficulty: f64,
    /// Weight of the captured-vs-missed feature-mass reward in the toy
    /// task (0 disables). With the time-profiled value tokens this gives
    /// the ratio policy a directional allocation signal across timesteps.
    pub capture_weight: f64,
    /// Per-dimension mean of the value tokens the capture reward targets.
    pub capture_mean: f64,
    /// Linearly decay the rank/selection temperatures to one tenth of
    /// their configured values over the toy training horizon.
    pub anneal_taus: bool,
    /// Forces this retention ratio at every layer of the toy stack when in
    /// (0, 1]; 0 disables the override.
    pub ratio_override: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: String::new(),
            seed: 42,
            out_dir: String::new(),
            n_tokens: 100,
            dim: 16,
            signal_count: 20,
            signal_mean: 10.0,
            k_init: 50.0,
            lr_router: 0.1,
            lr_budget: 2.0,
            lambda: 0.1,
            warmup_steps: 100,
            adapt_steps: 700,
            tau_rank: 0.1,
            tau_sel: 0.5,
            normalized_selection: false,
            noise_rel: 0.05,
            noise_floor: 0.02,
            bottleneck: 64,
            trials: 1000,
            repetitions: 100,
            strata: 16,
            t_max: 1000.0,
            gc_n: 64,
            gc_d: 16,
            gc_keep_fraction: 0.5,
            gc_rej_scale: 1.0,
            beta: 0.2,
            r_target: 0.6,
            lambda_budget: 1.0,
            lambda_b: 500.0,
            lambda_d: 1.0,
            n_layers: 4,
            hidden: 16,
            stack_tokens: 32,
            stage1_steps: 200,
            stage2_steps: 400,
            stage3_steps: 200,
            r_min: 0.3,
            r_max: 0.9,
            ratio_groups: 4,
            batch_timesteps: 24,
            lr_policy: 0.005,
            lr_anchor: 0.003,
            lr_blocks: 1e-3,
            logit_noise_std: 1.0,
            first_block_skip: true,
            distill_every: 4,
            lut_steps: 50,
            stage1_stratified: true,
            time_difficulty: 0.0,
            capture_weight: 1.0,
            capture_mean: 3.0,
            anneal_taus: false,
            ratio_override: 0.0,
        }
    }
}

impl ExperimentConfig {
    /// Parses the key = value format on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ShivaError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Sets one knob from its string form; used by the file parser and the
    /// CLI `--set key=value` overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                ShivaError::Config(format!("invalid value {value:?} for key {key}"))
            })
        }
        match key {
            "experiment" => self.experiment = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            "n_tokens" => self.n_tokens = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "signal_count" => self.signal_count = parse(key, value)?,
            "signal_mean" => self.signal_mean = parse(key, value)?,
            "k_init" => self.k_init = parse(key, value)?,
            "lr_router" => self.lr_router = parse(key, value)?,
            "lr_budget" => self.lr_budget = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "adapt_steps" => self.adapt_steps = parse(key, value)?,
            "tau_rank" => self.tau_rank = parse(key, value)?,
            "tau_sel" => self.tau_sel = parse(key, value)?,
            "normalized_selection" => self.normalized_selection = parse(key, value)?,
            "noise_rel" => self.noise_rel = parse(key, value)?,
            "noise_floor" => self.noise_floor = parse(key, value)?,
            "bottleneck" => self.bottleneck = parse(key, value)?,
            "trials" => self.trials = parse(key, value)?,
            "repetitions" => self.repetitions = parse(key, value)?,
            "strata" => self.strata = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "gc_n" => self.gc_n = parse(key, value)?,
            "gc_d" => self.gc_d = parse(key, value)?,
            "gc_keep_fraction" => self.gc_keep_fraction = parse(key, value)?,
            "gc_rej_scale" => self.gc_rej_scale = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "r_target" => self.r_target = parse(key, value)?,
            "lambda_budget" => self.lambda_budget = parse(key, value)?,
            "lambda_b" => self.lambda_b = parse(key, value)?,
            "lambda_d" => self.lambda_d = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "stack_tokens" => self.stack_tokens = parse(key, value)?,
            "stage1_steps" => self.stage1_steps = parse(key, value)?,
            "stage2_steps" => self.stage2_steps = parse(key, value)?,
            "stage3_steps" => self.stage3_steps = parse(key, value)?,
            "r_min" => self.r_min = parse(key, value)?,
            "r_max" => self.r_max = parse(key, value)?,
            "ratio_groups" => self.ratio_groups = parse(key, value)?,
            "batch_timesteps" => self.batch_timesteps = parse(key, value)?,
            "lr_policy" => self.lr_policy = parse(key, value)?,
            "lr_anchor" => self.lr_anchor = parse(key, value)?,
            "lr_blocks" => self.lr_blocks = parse(key, value)?,
            "logit_noise_std" => self.logit_noise_std = parse(key, value)?,
            "first_block_skip" => self.first_block_skip = parse(key, value)?,
            "distill_every" => self.distill_every = parse(key, value)?,
            "lut_steps" => self.lut_steps = parse(key, value)?,
            "stage1_stratified" => self.stage1_stratified = parse(key, value)?,
            "time_difficulty" => self.time_difficulty = parse(key, value)?,
            "capture_weight" => self.capture_weight = parse(key, value)?,
            "capture_mean" => self.capture_mean = parse(key, value)?,
            "anneal_taus" => self.anneal_taus = parse(key, value)?,
            "ratio_override" => self.ratio_override = parse(key, value)?,
            _ => return Err(ShivaError::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Basic cross-field validation shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.signal_count > self.n_tokens {
            return Err(ShivaError::Config(
                "signal_count cannot exceed n_tokens".to_string(),
            ));
        }
        if !(self.k_init >= 1.0 && self.k_init <= self.n_tokens as f64) {
            return Err(ShivaError::Config(format!(
                "k_init must lie in [1, n_tokens], got {}",
                self.k_init
            )));
        }
        if self.tau_rank <= 0.0 || self.tau_sel <= 0.0 {
            return Err(ShivaError::Config("temperatures must be positive".to_string()));
        }
        if !(0.0 < self.r_target && self.r_target < 1.0) {
            return Err(ShivaError::Config("r_target must lie in (0, 1)".to_string()));
        }
        Ok(())
    }
}
