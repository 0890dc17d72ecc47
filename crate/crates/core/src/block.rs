//! Minimal residual block stack with learned token selection.
//!
//! Each layer scores its tokens, keeps the top k = max(1, floor(N * r)),
//! runs only those through a per-token residual MLP, and scatters the
//! results back while rejected tokens ride the identity skip. The block
//! interior is deliberately per-token (no attention) so every gradient is
//! finite-difference checkable; the selection mechanics are identical
//! either way.
//!
//! Two forward modes:
//! - `Hard`: the production path. Deterministic top-k on (optionally
//!   perturbed) scores; the backward pass uses the residual single-path
//!   estimator for dL/dpi and routes gradient to the budget through the
//!   continuous k = N * r (straight-through over the floor).
//! - `Surrogate`: the verification path. Both branches run for every
//!   token, gated by pi: out = block(pi * x) + (1 - pi) * x. The full
//!   computation graph is differentiable, so analytic gradients match
//!   central finite differences.
//!
//! Router scores are computed on a detached view of the features: the
//! score path feeds router parameters only, never the main backward chain.
//! In hard mode that keeps the r = 1 stack exactly equivalent to a dense
//! one, gradients included.

use crate::error::{Result, ShivaError};
use crate::numeric::{dot, silu, silu_prime, Matrix, Rng};
use crate::policy::{PolicyCache, PolicyGrads, RatioPolicyConfig, RatioPolicyParams};
use crate::router::{
    router_backward, router_forward, GroupSharing, RouterCache, RouterConfig, RouterGrads,
    RouterGroupMap,
};
use crate::selection::{
    budget_for_ratio, budget_grad, hard_topk, residual_ste_grad, scatter_back, PathGradients,
    SelectionOutcome,
};
use crate::softrank::{
    chain_scores_grad, inclusion_grads, inclusion_prob, perturb_scores, soft_rank, InclusionProbs,
    SoftRankState,
};

/// Per-token residual transform: x + W2 silu(W1 x + b1) + b2.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub dim: usize,
    pub hidden: usize,
    /// hidden x dim.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// dim x hidden.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl BlockGrads {
    fn zeros(p: &BlockParams) -> Self {
        Self {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
        }
    }

    pub fn accumulate(&mut self, other: &BlockGrads) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }
}

impl BlockParams {
    pub fn init(dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound1 = 1.0 / (dim as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        Self {
            dim,
            hidden,
            w1: (0..hidden * dim).map(|_| rng.range(-bound1, bound1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..dim * hidden).map(|_| rng.range(-bound2, bound2)).collect(),
            b2: vec![0.0; dim],
        }
    }

    /// Runs the residual transform on every row. Returns (output,
    /// pre-activations) with the pre-activations cached for backward.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.dim {
            return Err(ShivaError::dims("block forward: token dim".to_string()));
        }
        let n = x.rows();
        let mut out = x.clone();
        let mut pre = Matrix::zeros(n, self.hidden);
        for i in 0..n {
            let xi = x.row(i);
            let pre_row = pre.row_mut(i);
            for h in 0..self.hidden {
                let wrow = &self.w1[h * self.dim..(h + 1) * self.dim];
                pre_row[h] = self.b1[h] + dot(wrow, xi);
            }
            let act: Vec<f64> = pre_row.iter().map(|&p| silu(p)).collect();
            let out_row = out.row_mut(i);
            for d in 0..self.dim {
                let wrow = &self.w2[d * self.hidden..(d + 1) * self.hidden];
                out_row[d] += self.b2[d] + dot(wrow, &act);
            }
        }
        Ok((out, pre))
    }

    /// Backward through the residual transform: returns parameter grads and
    /// dL/d(input rows), which includes the skip term.
    pub fn backward(&self, x: &Matrix, pre: &Matrix, d_out: &Matrix) -> Result<(BlockGrads, Matrix)> {
        if !d_out.same_shape(x) || pre.rows() != x.rows() {
            return Err(ShivaError::contract(
                "block backward: cache/gradient shape mismatch".to_string(),
            ));
        }
        let mut grads = BlockGrads::zeros(self);
        let mut d_x = d_out.clone();
        for i in 0..x.rows() {
            let g = d_out.row(i);
            let pre_row = pre.row(i);
            let act: Vec<f64> = pre_row.iter().map(|&p| silu(p)).collect();
            // d_f = g; through W2.
            let mut d_act = vec![0.0; self.hidden];
            for d in 0..self.dim {
                grads.b2[d] += g[d];
                let wrow = &self.w2[d * self.hidden..(d + 1) * self.hidden];
                let grow = &mut grads.w2[d * self.hidden..(d + 1) * self.hidden];
                for h in 0..self.hidden {
                    grow[h] += g[d] * act[h];
                    d_act[h] += g[d] * wrow[h];
                }
            }
            let xi = x.row(i);
            let dxi = d_x.row_mut(i);
            for h in 0..self.hidden {
                let d_pre = d_act[h] * silu_prime(pre_row[h]);
                grads.b1[h] += d_pre;
                let wrow = &self.w1[h * self.dim..(h + 1) * self.dim];
                let grow = &mut grads.w1[h * self.dim..(h + 1) * self.dim];
                for d in 0..self.dim {
                    grow[d] += d_pre * xi[d];
                    dxi[d] += d_pre * wrow[d];
                }
            }
        }
        Ok((grads, d_x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Hard,
    Surrogate,
}

/// Where each layer's retention ratio comes from.
#[derive(Debug, Clone)]
pub enum RatioSource {
    /// Evaluate the stack's policy at (t, layer), with exploration noise.
    Policy { noise_std: f64 },
    /// One externally supplied ratio for every layer (warmup training).
    Fixed(f64),
}

/// Constant per-path gradient offsets: the gradients of a linear loss
/// `sum_layers sum_i <sel, x_i^sel> + <rej, x_i^rej>` over the effective
/// path inputs at every unskipped layer. A captured-vs-missed reward uses
/// `sel = -c * ones`, `rej = +c * ones`. See
/// [`StackTrace::linear_path_loss`] for the matching loss value.
#[derive(Debug, Clone)]
pub struct PathOffsets {
    pub sel: Vec<f64>,
    pub rej: Vec<f64>,
}

impl PathOffsets {
    /// Offsets of the captured-minus-missed feature-mass reward at weight
    /// `c`: selecting gains `c * sum_d x_d`, rejecting loses it.
    pub fn capture(dim: usize, c: f64) -> Self {
        Self {
            sel: vec![-c; dim],
            rej: vec![c; dim],
        }
    }
}

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub sharing: GroupSharing,
    pub tau_rank: f64,
    pub tau_sel: f64,
    pub normalized_selection: bool,
    /// Gaussian score perturbation used in training forwards (0 disables).
    pub score_noise: f64,
    /// Never prune the first layer.
    pub first_block_skip: bool,
    pub r_target: f64,
}

impl StackConfig {
    pub fn new(n_layers: usize, dim: usize) -> Self {
        Self {
            n_layers,
            dim,
            hidden: 2 * dim,
            bottleneck: 8,
            sharing: GroupSharing::Pairwise,
            tau_rank: 0.1,
            tau_sel: 0.05,
            normalized_selection: true,
            score_noise: 0.0,
            first_block_skip: false,
            r_target: 0.6,
        }
    }
}

/// Per-layer forward record for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    skipped: bool,
    x_in: Matrix,
    router_cache: Option<RouterCache>,
    state: Option<SoftRankState>,
    probs: Option<InclusionProbs>,
    pub policy_cache: Option<PolicyCache>,
    pub r: f64,
    pub k_cont: f64,
    pub k_int: usize,
    outcome: Option<SelectionOutcome>,
    /// Rows fed to the block MLP (selected rows in hard mode, gated rows in
    /// surrogate mode, everything when skipped).
    block_input: Matrix,
    block_pre: Matrix,
}

#[derive(Debug, Clone)]
pub struct StackTrace {
    pub mode: ForwardMode,
    pub t: f64,
    pub layers: Vec<LayerTrace>,
    /// Tokens processed by each layer's block (the FLOP counter).
    pub processed_tokens: Vec<usize>,
}

impl StackTrace {
    /// Output of layer `l`: the next layer's input, or `final_out` for the
    /// last layer.
    pub fn layer_output<'a>(&'a self, layer: usize, final_out: &'a Matrix) -> &'a Matrix {
        if layer + 1 < self.layers.len() {
            &self.layers[layer + 1].x_in
        } else {
            final_out
        }
    }

    /// Value of the linear path loss whose gradients are [`PathOffsets`]:
    /// hard mode sums `<sel, x_i>` over selected and `<rej, x_i>` over
    /// rejected tokens; surrogate mode gates the same terms by pi and
    /// 1 - pi. Skipped layers contribute nothing.
    pub fn linear_path_loss(&self, offsets: &PathOffsets) -> f64 {
        let mut total = 0.0;
        for tr in &self.layers {
            if tr.skipped {
                continue;
            }
            match self.mode {
                ForwardMode::Hard => {
                    let outcome = tr.outcome.as_ref().expect("hard trace has outcome");
                    for &i in &outcome.indices_sel {
                        total += dot(&offsets.sel, tr.x_in.row(i));
                    }
                    for &i in &outcome.indices_rej {
                        total += dot(&offsets.rej, tr.x_in.row(i));
                    }
                }
                ForwardMode::Surrogate => {
                    let probs = tr.probs.as_ref().expect("unskipped layer has probs");
                    for i in 0..tr.x_in.rows() {
                        let pi = probs.probs[i];
                        total += pi * dot(&offsets.sel, tr.x_in.row(i))
                            + (1.0 - pi) * dot(&offsets.rej, tr.x_in.row(i));
                    }
                }
            }
        }
        total
    }
}

/// All gradients produced by one backward pass.
#[derive(Debug)]
pub struct StackGrads {
    pub blocks: Vec<BlockGrads>,
    /// Parameter grads per router group (input grads inside are unused).
    pub routers: Vec<RouterGrads>,
    /// L x bottleneck layer-embedding gradients.
    pub layer_emb: Matrix,
    pub policy: PolicyGrads,
    pub d_input: Matrix,
    /// Per-layer dL/dk along the relaxed budget path.
    pub d_k: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockStack {
    pub cfg: StackConfig,
    pub blocks: Vec<BlockParams>,
    pub routers: RouterGroupMap,
    pub policy: RatioPolicyParams,
}

impl BlockStack {
    pub fn init(cfg: StackConfig, rng: &mut Rng) -> Result<Self> {
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams::init(cfg.dim, cfg.hidden, rng))
            .collect();
        let router_cfg = RouterConfig {
            dim_in: cfg.dim,
            dim_t: 0,
            dim_c: 0,
            bottleneck: cfg.bottleneck,
        };
        let routers = RouterGroupMap::init(cfg.n_layers, cfg.sharing, router_cfg, rng);
        let mut policy_cfg = RatioPolicyConfig::new(cfg.n_layers, cfg.r_target);
        // Desk-scale branch widths; the production defaults are overkill
        // for a block interior this small.
        policy_cfg.emb_dim = 16;
        policy_cfg.hidden = 16;
        policy_cfg.time_freqs = 8;
        let policy = RatioPolicyParams::init(policy_cfg, rng)?;
        Ok(Self {
            cfg,
            blocks,
            routers,
            policy,
        })
    }

    fn skip_layer(&self, layer: usize) -> bool {
        self.cfg.first_block_skip && layer == 0
    }

    fn ratio_for_layer(
        &self,
        layer: usize,
        t: f64,
        ratio: &RatioSource,
        rng: &mut Option<&mut Rng>,
    ) -> Result<(f64, Option<PolicyCache>)> {
        match ratio {
            RatioSource::Fixed(r) => {
                if !(0.0 < *r && *r <= 1.0) {
                    return Err(ShivaError::invalid(format!(
                        "fixed ratio must lie in (0, 1], got {r}"
                    )));
                }
                Ok((*r, None))
            }
            RatioSource::Policy { noise_std } => {
                let (_, r, cache) =
                    self.policy
                        .forward(t, layer, *noise_std, rng.as_deref_mut())?;
                Ok((r, Some(cache)))
            }
        }
    }

    /// Runs the stack over a token matrix. `rng` is required only when the
    /// score perturbation or policy exploration noise is active.
    pub fn forward(
        &self,
        x: &Matrix,
        t: f64,
        mode: ForwardMode,
        ratio: &RatioSource,
        rng: Option<&mut Rng>,
    ) -> Result<(Matrix, StackTrace)> {
        if x.cols() != self.cfg.dim {
            return Err(ShivaError::dims("stack forward: token dim".to_string()));
        }
        let n = x.rows();
        let mut rng = rng;
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        let mut processed = Vec::with_capacity(self.cfg.n_layers);
        let mut current = x.clone();

        for layer in 0..self.cfg.n_layers {
            if self.skip_layer(layer) {
                let (out, pre) = self.blocks[layer].forward(&current)?;
                layers.push(LayerTrace {
                    skipped: true,
                    x_in: current.clone(),
                    router_cache: None,
                    state: None,
                    probs: None,
                    policy_cache: None,
                    r: 1.0,
                    k_cont: n as f64,
                    k_int: n,
                    outcome: None,
                    block_input: current,
                    block_pre: pre,
                });
                processed.push(n);
                current = out;
                continue;
            }

            let (r, policy_cache) = self.ratio_for_layer(layer, t, ratio, &mut rng)?;
            let k_cont = (n as f64 * r).min(n as f64);
            let k_int = budget_for_ratio(n, r);

            let (scores, router_cache) = router_forward(
                self.routers.router_for_layer(layer),
                &current,
                None,
                None,
                Some(self.routers.layer_emb.row(layer)),
            )?;
            let perturbed = if self.cfg.score_noise > 0.0 {
                match rng.as_deref_mut() {
                    Some(r) => perturb_scores(&scores, self.cfg.score_noise, r)?,
                    None => {
                        return Err(ShivaError::invalid(
                            "score_noise > 0 requires an rng".to_string(),
                        ))
                    }
                }
            } else {
                scores.clone()
            };
            let state = soft_rank(&perturbed, self.cfg.tau_rank)?;
            let probs = inclusion_prob(
                &state,
                k_cont,
                self.cfg.tau_sel,
                self.cfg.normalized_selection,
            )?;

            match mode {
                ForwardMode::Hard => {
                    let outcome = hard_topk(&perturbed, k_int, &current)?;
                    debug_assert_eq!(outcome.k(), k_int, "exact budget adherence");
                    let (y_sel, pre) = self.blocks[layer].forward(&outcome.x_sel)?;
                    let out = scatter_back(&outcome, &y_sel, &outcome.x_rej)?;
                    processed.push(k_int);
                    layers.push(LayerTrace {
                        skipped: false,
                        x_in: current.clone(),
                        router_cache: Some(router_cache),
                        state: Some(state),
                        probs: Some(probs),
                        policy_cache,
                        r,
                        k_cont,
                        k_int,
                        block_input: outcome.x_sel.clone(),
                        block_pre: pre,
                        outcome: Some(outcome),
                    });
                    current = out;
                }
                ForwardMode::Surrogate => {
                    let mut gated = current.clone();
                    for i in 0..n {
                        let pi = probs.probs[i];
                        for v in gated.row_mut(i) {
                            *v *= pi;
                        }
                    }
                    let (y, pre) = self.blocks[layer].forward(&gated)?;
                    let mut out = y;
                    for i in 0..n {
                        let keep = 1.0 - probs.probs[i];
                        let src = current.row(i).to_vec();
                        for (o, xv) in out.row_mut(i).iter_mut().zip(src) {
                            *o += keep * xv;
                        }
                    }
                    processed.push(n);
                    layers.push(LayerTrace {
                        skipped: false,
                        x_in: current.clone(),
                        router_cache: Some(router_cache),
                        state: Some(state),
                        probs: Some(probs),
                        policy_cache,
                        r,
                        k_cont,
                        k_int,
                        outcome: None,
                        block_input: gated,
                        block_pre: pre,
                    });
                    current = out;
                }
            }
        }

        Ok((
            current,
            StackTrace {
                mode,
                t,
                layers,
                processed_tokens: processed,
            },
        ))
    }

    /// Backward through a recorded forward. Block parameters receive
    /// gradient only through tokens they processed; rejected tokens route
    /// identity gradients; score gradients reach routers through the
    /// single-path estimator and the rank chain; the budget path reaches
    /// the policy through the relaxed k = N * r.
    pub fn backward(&self, trace: &StackTrace, dl_dout: &Matrix) -> Result<StackGrads> {
        self.backward_with_taps(trace, dl_dout, &[])
    }

    /// Like [`BlockStack::backward`], with extra gradients injected at
    /// intermediate layer outputs (distillation hooks). `taps[l]`, when
    /// present, is added to `dL/d(output of layer l)`.
    pub fn backward_with_taps(
        &self,
        trace: &StackTrace,
        dl_dout: &Matrix,
        taps: &[Option<Matrix>],
    ) -> Result<StackGrads> {
        self.backward_full(trace, dl_dout, taps, None)
    }

    /// Full-control backward: distillation taps plus optional per-path
    /// gradient offsets (the linear path loss of [`PathOffsets`]). Offsets
    /// enter the straight-through estimate and the input chain at every
    /// unskipped layer; block parameters never see them because the linear
    /// loss reads path inputs directly.
    pub fn backward_full(
        &self,
        trace: &StackTrace,
        dl_dout: &Matrix,
        taps: &[Option<Matrix>],
        offsets: Option<&PathOffsets>,
    ) -> Result<StackGrads> {
        if let Some(o) = offsets {
            if o.sel.len() != self.cfg.dim || o.rej.len() != self.cfg.dim {
                return Err(ShivaError::dims("path offsets must match token dim".to_string()));
            }
        }
        if trace.layers.len() != self.cfg.n_layers {
            return Err(ShivaError::contract("stack backward: stale trace".to_string()));
        }
        if !taps.is_empty() && taps.len() != self.cfg.n_layers {
            return Err(ShivaError::contract(
                "stack backward: tap count must match layer count".to_string(),
            ));
        }
        let n = dl_dout.rows();
        let mut grads = StackGrads {
            blocks: self.blocks.iter().map(BlockGrads::zeros).collect(),
            routers: self
                .routers
                .routers
                .iter()
                .map(|r| {
                    // Zero-grads template via a zero backward is wasteful;
                    // build directly from shapes.
                    RouterGrads {
                        proj_x_w: vec![0.0; r.proj_x_w.len()],
                        proj_x_b: vec![0.0; r.proj_x_b.len()],
                        proj_t_w: vec![0.0; r.proj_t_w.len()],
                        proj_c_w: vec![0.0; r.proj_c_w.len()],
                        readout: vec![0.0; r.readout.len()],
                        ln_gain: vec![0.0; r.ln_gain.len()],
                        ln_bias: vec![0.0; r.ln_bias.len()],
                        l_emb: vec![0.0; r.config.bottleneck],
                        d_x: Matrix::zeros(0, 0),
                    }
                })
                .collect(),
            layer_emb: Matrix::zeros(self.cfg.n_layers, self.cfg.bottleneck),
            policy: PolicyGrads::zeros(&self.policy.config),
            d_input: Matrix::zeros(n, self.cfg.dim),
            d_k: vec![0.0; self.cfg.n_layers],
        };

        let mut g = dl_dout.clone();
        for layer in (0..self.cfg.n_layers).rev() {
            if let Some(Some(tap)) = taps.get(layer) {
                if !tap.same_shape(&g) {
                    return Err(ShivaError::dims("stack backward: tap shape".to_string()));
                }
                for (dst, src) in g.data_mut().iter_mut().zip(tap.data()) {
                    *dst += src;
                }
            }
            let tr = &trace.layers[layer];
            if tr.x_in.rows() != n {
                return Err(ShivaError::contract(
                    "stack backward: trace token count mismatch".to_string(),
                ));
            }
            if tr.skipped {
                let (bg, d_in) =
                    self.blocks[layer].backward(&tr.block_input, &tr.block_pre, &g)?;
                grads.blocks[layer].accumulate(&bg);
                g = d_in;
                continue;
            }
            let state = tr.state.as_ref().expect("unskipped layer has rank state");
            let probs = tr.probs.as_ref().expect("unskipped layer has probs");
            let group = self.routers.group_of[layer];

            let (dl_dpi, d_in) = match trace.mode {
                ForwardMode::Hard => {
                    let outcome = tr.outcome.as_ref().expect("hard trace has outcome");
                    let g_sel = g.gather_rows(&outcome.indices_sel)?;
                    let mut g_rej = g.gather_rows(&outcome.indices_rej)?;
                    let (bg, mut d_sel_path) =
                        self.blocks[layer].backward(&tr.block_input, &tr.block_pre, &g_sel)?;
                    grads.blocks[layer].accumulate(&bg);
                    if let Some(o) = offsets {
                        for i in 0..d_sel_path.rows() {
                            for (v, off) in d_sel_path.row_mut(i).iter_mut().zip(&o.sel) {
                                *v += off;
                            }
                        }
                        for i in 0..g_rej.rows() {
                            for (v, off) in g_rej.row_mut(i).iter_mut().zip(&o.rej) {
                                *v += off;
                            }
                        }
                    }
                    let paths = PathGradients {
                        grad_sel: d_sel_path.clone(),
                        grad_rej: g_rej.clone(),
                    };
                    let dl_dpi = residual_ste_grad(&paths, outcome, &tr.x_in)?;
                    let d_in = scatter_back(outcome, &d_sel_path, &g_rej)?;
                    (dl_dpi, d_in)
                }
                ForwardMode::Surrogate => {
                    let (bg, mut d_gated) =
                        self.blocks[layer].backward(&tr.block_input, &tr.block_pre, &g)?;
                    grads.blocks[layer].accumulate(&bg);
                    let mut g_skip = g.clone();
                    if let Some(o) = offsets {
                        for i in 0..n {
                            for (v, off) in d_gated.row_mut(i).iter_mut().zip(&o.sel) {
                                *v += off;
                            }
                            for (v, off) in g_skip.row_mut(i).iter_mut().zip(&o.rej) {
                                *v += off;
                            }
                        }
                    }
                    let mut dl_dpi = vec![0.0; n];
                    let mut d_in = Matrix::zeros(n, self.cfg.dim);
                    for i in 0..n {
                        let pi = probs.probs[i];
                        let xi = tr.x_in.row(i);
                        dl_dpi[i] = dot(d_gated.row(i), xi) - dot(g_skip.row(i), xi);
                        let dst = d_in.row_mut(i);
                        for (d, (dg, gu)) in
                            d_gated.row(i).iter().zip(g_skip.row(i)).enumerate()
                        {
                            dst[d] = pi * dg + (1.0 - pi) * gu;
                        }
                    }
                    (dl_dpi, d_in)
                }
            };

            let dl_ds = chain_scores_grad(&dl_dpi, probs, state)?;
            let router_cache = tr
                .router_cache
                .as_ref()
                .expect("unskipped layer has router cache");
            let rg = router_backward(
                self.routers.router_for_layer(layer),
                router_cache,
                &dl_ds,
            )?;
            grads.routers[group].accumulate(&rg);
            for (dst, src) in grads.layer_emb.row_mut(layer).iter_mut().zip(&rg.l_emb) {
                *dst += src;
            }

            let (_, dpi_dk) = inclusion_grads(probs);
            let dl_dk = budget_grad(&dl_dpi, &dpi_dk)?;
            grads.d_k[layer] = dl_dk;
            if let Some(cache) = &tr.policy_cache {
                let dl_dr = n as f64 * dl_dk;
                let pg = self.policy.backward(cache, dl_dr)?;
                grads.policy.accumulate(&pg);
            }

            g = d_in;
            // In surrogate (verification) mode the score path is part of
            // the true derivative of the forward function, so fold the
            // router's input gradient into the chain. The hard path leaves
            // it out: scores only steer routing there.
            if trace.mode == ForwardMode::Surrogate {
                for i in 0..n {
                    for (dst, src) in g.row_mut(i).iter_mut().zip(rg.d_x.row(i)) {
                        *dst += src;
                    }
                }
            }
        }
        grads.d_input = g;
        Ok(grads)
    }

    /// Straight-line dense forward with the selection machinery removed.
    pub fn dense_forward(&self, x: &Matrix) -> Result<(Matrix, Vec<(Matrix, Matrix)>)> {
        let mut current = x.clone();
        let mut caches = Vec::with_capacity(self.cfg.n_layers);
        for block in &self.blocks {
            let (out, pre) = block.forward(&current)?;
            caches.push((current, pre));
            current = out;
        }
        Ok((current, caches))
    }

    pub fn dense_backward(
        &self,
        caches: &[(Matrix, Matrix)],
        dl_dout: &Matrix,
    ) -> Result<(Vec<BlockGrads>, Matrix)> {
        let mut g = dl_dout.clone();
        let mut grads: Vec<BlockGrads> = self.blocks.iter().map(BlockGrads::zeros).collect();
        for layer in (0..self.cfg.n_layers).rev() {
            let (input, pre) = &caches[layer];
            let (bg, d_in) = self.blocks[layer].backward(input, pre, &g)?;
            grads[layer].accumulate(&bg);
            g = d_in;
        }
        Ok((grads, g))
    }

    /// Every learnable parameter as one flat vector: blocks, routers,
    /// layer embeddings, policy - in that order.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(&b.w1);
            out.extend_from_slice(&b.b1);
            out.extend_from_slice(&b.w2);
            out.extend_from_slice(&b.b2);
        }
        for r in &self.routers.routers {
            out.extend_from_slice(&r.proj_x_w);
            out.extend_from_slice(&r.proj_x_b);
            out.extend_from_slice(&r.proj_t_w);
            out.extend_from_slice(&r.proj_c_w);
            out.extend_from_slice(&r.readout);
            out.extend_from_slice(&r.ln_gain);
            out.extend_from_slice(&r.ln_bias);
        }
        out.extend_from_slice(self.routers.layer_emb.data());
        out.extend_from_slice(&self.policy.flatten());
        out
    }

    pub fn unflatten_params(&self, flat: &[f64]) -> Result<BlockStack> {
        if flat.len() != self.flatten_params().len() {
            return Err(ShivaError::dims("stack unflatten length".to_string()));
        }
        let mut copy = self.clone();
        let mut pos = 0;
        let mut take = |n: usize| -> Vec<f64> {
            let s = flat[pos..pos + n].to_vec();
            pos += n;
            s
        };
        for b in &mut copy.blocks {
            b.w1 = take(b.w1.len());
            b.b1 = take(b.b1.len());
            b.w2 = take(b.w2.len());
            b.b2 = take(b.b2.len());
        }
        for r in &mut copy.routers.routers {
            r.proj_x_w = take(r.proj_x_w.len());
            r.proj_x_b = take(r.proj_x_b.len());
            r.proj_t_w = take(r.proj_t_w.len());
            r.proj_c_w = take(r.proj_c_w.len());
            r.readout = take(r.readout.len());
            r.ln_gain = take(r.ln_gain.len());
            r.ln_bias = take(r.ln_bias.len());
        }
        let emb_len = copy.routers.layer_emb.data().len();
        let emb = take(emb_len);
        copy.routers.layer_emb = Matrix::from_vec(
            copy.routers.layer_emb.rows(),
            copy.routers.layer_emb.cols(),
            emb,
        )?;
        let policy_len = copy.policy.flatten().len();
        let rest = take(policy_len);
        copy.policy = copy.policy.unflatten(&rest)?;
        Ok(copy)
    }

    /// Gradients flattened in the same order as [`BlockStack::flatten_params`].
    pub fn flatten_grads(&self, grads: &StackGrads) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &grads.blocks {
            out.extend_from_slice(&b.w1);
            out.extend_from_slice(&b.b1);
            out.extend_from_slice(&b.w2);
            out.extend_from_slice(&b.b2);
        }
        for r in &grads.routers {
            out.extend_from_slice(&r.proj_x_w);
            out.extend_from_slice(&r.proj_x_b);
            out.extend_from_slice(&r.proj_t_w);
            out.extend_from_slice(&r.proj_c_w);
            out.extend_from_slice(&r.readout);
            out.extend_from_slice(&r.ln_gain);
            out.extend_from_slice(&r.ln_bias);
        }
        out.extend_from_slice(grads.layer_emb.data());
        out.extend_from_slice(&RatioPolicyParams::flatten_grads(&grads.policy));
        out
    }
}
