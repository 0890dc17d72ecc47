//! Adaptive retention-ratio policy.
//!
//! Predicts a retention ratio r in (0, 1) for every (timestep, layer) pair
//! through two decoupled additive branches plus a learnable anchor:
//!
//!   `logit(r) = time_mlp(sinusoidal(t)) + layer_mlp(layer_table[l]) + anchor`,
//!   r = sigmoid(logit + eps),  eps ~ N(0, noise_std^2) during exploration.
//!
//! The anchor starts at inverse_sigmoid(r_target) and both MLP output
//! layers start at zero, so a fresh policy emits exactly r_target
//! everywhere. Because the branches are additive, the logit difference
//! between two layers is independent of the timestep, and because the
//! policy depends on nothing but (t, l) it compiles to a lookup table for
//! inference.

use crate::error::{Result, ShivaError};
use crate::numeric::{inverse_sigmoid, sigmoid, silu, silu_prime, Matrix, Rng};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioPolicyConfig {
    pub n_layers: usize,
    /// Width of the learnable layer embeddings.
    pub emb_dim: usize,
    /// Hidden width of both MLP branches.
    pub hidden: usize,
    /// Number of sinusoidal frequencies; the time feature is 2x this.
    pub time_freqs: usize,
    /// Longest sinusoid period; frequencies are geometrically spaced
    /// between 1 and 1/max_period.
    pub max_period: f64,
    /// Target global retention ratio the anchor is initialized to.
    pub r_target: f64,
}

impl RatioPolicyConfig {
    pub fn new(n_layers: usize, r_target: f64) -> Self {
        Self {
            n_layers,
            emb_dim: 256,
            hidden: 256,
            time_freqs: 64,
            max_period: 10_000.0,
            r_target,
        }
    }

    pub fn time_feat_dim(&self) -> usize {
        2 * self.time_freqs
    }
}

/// One two-layer MLP branch: Linear -> SiLU -> Linear -> scalar.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Branch {
    /// hidden x input weights, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// Output layer, length hidden; zero-initialized.
    w2: Vec<f64>,
    b2: f64,
}

impl Branch {
    fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w1: (0..hidden * input).map(|_| rng.range(-bound, bound)).collect(),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    fn forward(&self, input: &[f64], hidden: usize) -> (f64, Vec<f64>) {
        let inp = input.len();
        let mut pre = vec![0.0; hidden];
        for (h, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[h * inp..(h + 1) * inp];
            *p = self.b1[h] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
        let out = self.b2
            + pre
                .iter()
                .zip(&self.w2)
                .map(|(p, w)| silu(*p) * w)
                .sum::<f64>();
        (out, pre)
    }

    /// dL/d(branch output) -> parameter grads (+ input grad for the layer
    /// table).
    fn backward(&self, input: &[f64], pre: &[f64], d_out: f64) -> (BranchGrads, Vec<f64>) {
        let inp = input.len();
        let hidden = pre.len();
        let mut g = BranchGrads::zeros(inp, hidden);
        let mut d_input = vec![0.0; inp];
        g.b2 = d_out;
        for h in 0..hidden {
            g.w2[h] = d_out * silu(pre[h]);
            let d_pre = d_out * self.w2[h] * silu_prime(pre[h]);
            g.b1[h] = d_pre;
            let wrow = &self.w1[h * inp..(h + 1) * inp];
            let grow = &mut g.w1[h * inp..(h + 1) * inp];
            for i in 0..inp {
                grow[i] = d_pre * input[i];
                d_input[i] += d_pre * wrow[i];
            }
        }
        (g, d_input)
    }
}

#[derive(Debug, Clone)]
pub struct BranchGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl BranchGrads {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    fn accumulate(&mut self, other: &BranchGrads) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        self.b2 += other.b2;
    }
}

/// Learnable state of the ratio policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioPolicyParams {
    pub config: RatioPolicyConfig,
    /// n_layers x emb_dim learnable embeddings.
    layer_table: Vec<f64>,
    layer_branch: Branch,
    time_branch: Branch,
    pub b_anchor: f64,
}

/// Gradients matching [`RatioPolicyParams`]. The layer-table gradient is
/// sparse: only the row of the evaluated layer is populated.
#[derive(Debug, Clone)]
pub struct PolicyGrads {
    pub layer_table: Vec<f64>,
    pub layer_branch: BranchGrads,
    pub time_branch: BranchGrads,
    pub b_anchor: f64,
}

impl PolicyGrads {
    pub fn zeros(cfg: &RatioPolicyConfig) -> Self {
        Self {
            layer_table: vec![0.0; cfg.n_layers * cfg.emb_dim],
            layer_branch: BranchGrads::zeros(cfg.emb_dim, cfg.hidden),
            time_branch: BranchGrads::zeros(cfg.time_feat_dim(), cfg.hidden),
            b_anchor: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &PolicyGrads) {
        for (a, b) in self.layer_table.iter_mut().zip(&other.layer_table) {
            *a += b;
        }
        self.layer_branch.accumulate(&other.layer_branch);
        self.time_branch.accumulate(&other.time_branch);
        self.b_anchor += other.b_anchor;
    }
}

/// Forward intermediates needed for the backward pass.
#[derive(Debug, Clone)]
pub struct PolicyCache {
    pub layer: usize,
    time_feat: Vec<f64>,
    layer_pre: Vec<f64>,
    time_pre: Vec<f64>,
    /// r = sigmoid(logit + noise); cached for the sigmoid derivative.
    pub r: f64,
}

/// Sinusoidal timestep features: [sin(w_i t), cos(w_i t)] with geometric
/// frequencies from 1 down to 1/max_period.
pub fn sinusoidal_features(t: f64, n_freqs: usize, max_period: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freqs);
    for i in 0..n_freqs {
        let exponent = if n_freqs > 1 {
            i as f64 / (n_freqs - 1) as f64
        } else {
            0.0
        };
        let w = max_period.powf(-exponent);
        out.push((w * t).sin());
    }
    for i in 0..n_freqs {
        let exponent = if n_freqs > 1 {
            i as f64 / (n_freqs - 1) as f64
        } else {
            0.0
        };
        let w = max_period.powf(-exponent);
        out.push((w * t).cos());
    }
    out
}

impl RatioPolicyParams {
    pub fn init(config: RatioPolicyConfig, rng: &mut Rng) -> Result<Self> {
        if !(0.0 < config.r_target && config.r_target < 1.0) {
            return Err(ShivaError::invalid(format!(
                "r_target must lie in (0, 1), got {}",
                config.r_target
            )));
        }
        let b_anchor = inverse_sigmoid(config.r_target)?;
        let layer_table = (0..config.n_layers * config.emb_dim)
            .map(|_| rng.gaussian(0.0, 0.02).expect("positive std"))
            .collect();
        Ok(Self {
            layer_branch: Branch::init(config.emb_dim, config.hidden, rng),
            time_branch: Branch::init(config.time_feat_dim(), config.hidden, rng),
            layer_table,
            b_anchor,
            config,
        })
    }

    fn layer_emb(&self, layer: usize) -> &[f64] {
        let e = self.config.emb_dim;
        &self.layer_table[layer * e..(layer + 1) * e]
    }

    /// Evaluates the policy at (t, layer). With `noise_std > 0` a Gaussian
    /// draw is added to the logit before the sigmoid (exploration); with
    /// `noise_std = 0` the output is fully deterministic. Returns the clean
    /// logit, the ratio, and the backward cache.
    pub fn forward(
        &self,
        t: f64,
        layer: usize,
        noise_std: f64,
        rng: Option<&mut Rng>,
    ) -> Result<(f64, f64, PolicyCache)> {
        if layer >= self.config.n_layers {
            return Err(ShivaError::invalid(format!(
                "layer {layer} out of range (< {})",
                self.config.n_layers
            )));
        }
        if noise_std < 0.0 {
            return Err(ShivaError::invalid("noise_std must be >= 0".to_string()));
        }
        let time_feat =
            sinusoidal_features(t, self.config.time_freqs, self.config.max_period);
        let (time_out, time_pre) = self.time_branch.forward(&time_feat, self.config.hidden);
        let (layer_out, layer_pre) = self
            .layer_branch
            .forward(self.layer_emb(layer), self.config.hidden);
        let logit = time_out + layer_out + self.b_anchor;
        let noise = if noise_std > 0.0 {
            match rng {
                Some(r) => r.gaussian(0.0, noise_std)?,
                None => {
                    return Err(ShivaError::invalid(
                        "noise_std > 0 requires an rng".to_string(),
                    ))
                }
            }
        } else {
            0.0
        };
        let r = sigmoid(logit + noise);
        Ok((
            logit,
            r,
            PolicyCache {
                layer,
                time_feat,
                layer_pre,
                time_pre,
                r,
            },
        ))
    }

    /// Backpropagates dL/dr through the sigmoid (at the noisy point where
    /// the forward evaluated it), both branches, and the anchor.
    pub fn backward(&self, cache: &PolicyCache, dl_dr: f64) -> Result<PolicyGrads> {
        if cache.layer >= self.config.n_layers
            || cache.time_feat.len() != self.config.time_feat_dim()
        {
            return Err(ShivaError::contract(
                "policy backward: cache does not match this policy".to_string(),
            ));
        }
        let d_logit = dl_dr * cache.r * (1.0 - cache.r);
        let mut grads = PolicyGrads::zeros(&self.config);
        grads.b_anchor = d_logit;
        let (time_g, _) = self
            .time_branch
            .backward(&cache.time_feat, &cache.time_pre, d_logit);
        grads.time_branch = time_g;
        let (layer_g, d_emb) = self.layer_branch.backward(
            self.layer_emb(cache.layer),
            &cache.layer_pre,
            d_logit,
        );
        grads.layer_branch = layer_g;
        let e = self.config.emb_dim;
        grads.layer_table[cache.layer * e..(cache.layer + 1) * e].copy_from_slice(&d_emb);
        Ok(grads)
    }

    /// Applies a raw gradient step in place (used by the harness training
    /// loops; optimizer state lives with the caller).
    pub fn apply_update(&mut self, grads: &PolicyGrads, lr: f64) {
        for (p, g) in self.layer_table.iter_mut().zip(&grads.layer_table) {
            *p -= lr * g;
        }
        let apply = |branch: &mut Branch, g: &BranchGrads| {
            for (p, gv) in branch.w1.iter_mut().zip(&g.w1) {
                *p -= lr * gv;
            }
            for (p, gv) in branch.b1.iter_mut().zip(&g.b1) {
                *p -= lr * gv;
            }
            for (p, gv) in branch.w2.iter_mut().zip(&g.w2) {
                *p -= lr * gv;
            }
            branch.b2 -= lr * g.b2;
        };
        apply(&mut self.layer_branch, &grads.layer_branch);
        apply(&mut self.time_branch, &grads.time_branch);
        self.b_anchor -= lr * grads.b_anchor;
    }

    /// Flattens every parameter into one vector (finite-difference probes).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.layer_table.clone();
        for b in [&self.layer_branch, &self.time_branch] {
            out.extend_from_slice(&b.w1);
            out.extend_from_slice(&b.b1);
            out.extend_from_slice(&b.w2);
            out.push(b.b2);
        }
        out.push(self.b_anchor);
        out
    }

    /// Inverse of [`RatioPolicyParams::flatten`].
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.flatten().len() {
            return Err(ShivaError::dims("policy unflatten length".to_string()));
        }
        let mut copy = self.clone();
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s.to_vec()
        };
        copy.layer_table = take(self.layer_table.len());
        for b in [&mut copy.layer_branch, &mut copy.time_branch] {
            b.w1 = take(b.w1.len());
            b.b1 = take(b.b1.len());
            b.w2 = take(b.w2.len());
            b.b2 = take(1)[0];
        }
        copy.b_anchor = take(1)[0];
        Ok(copy)
    }

    /// Flattens gradients in the same order as [`RatioPolicyParams::flatten`].
    pub fn flatten_grads(grads: &PolicyGrads) -> Vec<f64> {
        let mut out = grads.layer_table.clone();
        for b in [&grads.layer_branch, &grads.time_branch] {
            out.extend_from_slice(&b.w1);
            out.extend_from_slice(&b.b1);
            out.extend_from_slice(&b.w2);
            out.push(b.b2);
        }
        out.push(grads.b_anchor);
        out
    }

    /// Evaluates the noise-free policy on a timestep grid, producing the
    /// inference lookup table. Each entry equals `forward(t, l, 0)` down to
    /// the last bit because it is the same evaluation.
    pub fn compile_lut(&self, t_steps: &[f64]) -> Result<RatioLut> {
        if t_steps.is_empty() {
            return Err(ShivaError::invalid(
                "compile_lut requires at least one timestep".to_string(),
            ));
        }
        let l = self.config.n_layers;
        let mut grid = Matrix::zeros(t_steps.len(), l);
        for (s, &t) in t_steps.iter().enumerate() {
            for layer in 0..l {
                let (_, r, _) = self.forward(t, layer, 0.0, None)?;
                grid.set(s, layer, r);
            }
        }
        Ok(RatioLut {
            grid,
            t_values: t_steps.to_vec(),
        })
    }
}

/// Compiled retention ratios: rows are timesteps, columns are layers.
#[derive(Debug, Clone)]
pub struct RatioLut {
    pub grid: Matrix,
    pub t_values: Vec<f64>,
}

impl RatioLut {
    pub fn lookup(&self, step_idx: usize, layer: usize) -> f64 {
        self.grid.get(step_idx, layer)
    }

    /// CSV export: one row per timestep, one column per layer, with a
    /// leading `t` column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for l in 0..self.grid.cols() {
            out.push_str(&format!(",layer_{l}"));
        }
        out.push('\n');
        for (s, &t) in self.t_values.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for l in 0..self.grid.cols() {
                out.push_str(&format!(",{}", self.grid.get(s, l)));
            }
            out.push('\n');
        }
        out
    }
}
