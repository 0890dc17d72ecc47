//! Context-aware token importance router.
//!
//! Scores each token by projecting its features into a small bottleneck,
//! adding a shared context vector (time, semantics, layer identity), then
//! SiLU -> LayerNorm -> scalar readout:
//!
//!   s_i = w . LayerNorm(SiLU(ProjX x_i + h_ctx)),
//!   h_ctx = ProjT t + ProjC c + l_emb.
//!
//! The layer identity embedding is a learnable vector of bottleneck width
//! passed straight in (identity projection). Absent contexts contribute
//! zero. Forward and backward are written out by hand so every parameter
//! gradient can be checked against finite differences.

use crate::error::{Result, ShivaError};
use crate::numeric::{
    layer_norm_backward, layer_norm_with_cache, silu, silu_prime, LayerNormCache, Matrix, Rng,
};
use serde::{Deserialize, Serialize};

/// Current save-file format version.
pub const ROUTER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Token feature dimension D.
    pub dim_in: usize,
    /// Time-context input dimension (0 disables the projection).
    pub dim_t: usize,
    /// Semantic-context input dimension (0 disables the projection).
    pub dim_c: usize,
    /// Bottleneck width d'.
    pub bottleneck: usize,
}

impl RouterConfig {
    pub fn new(dim_in: usize) -> Self {
        Self {
            dim_in,
            dim_t: 0,
            dim_c: 0,
            bottleneck: 64,
        }
    }
}

/// All learnable router parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouterParams {
    pub config: RouterConfig,
    /// d' x D feature projection.
    pub proj_x_w: Vec<f64>,
    pub proj_x_b: Vec<f64>,
    /// d' x dim_t time-context projection (empty when dim_t = 0).
    pub proj_t_w: Vec<f64>,
    /// d' x dim_c semantic-context projection (empty when dim_c = 0).
    pub proj_c_w: Vec<f64>,
    /// Scalar readout, length d'.
    pub readout: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

/// Gradients for every router parameter plus the non-parameter inputs the
/// stack needs (layer embedding and token features).
#[derive(Debug, Clone)]
pub struct RouterGrads {
    pub proj_x_w: Vec<f64>,
    pub proj_x_b: Vec<f64>,
    pub proj_t_w: Vec<f64>,
    pub proj_c_w: Vec<f64>,
    pub readout: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub l_emb: Vec<f64>,
    pub d_x: Matrix,
}

impl RouterGrads {
    fn zeros(cfg: &RouterConfig, n_tokens: usize) -> Self {
        let d = cfg.bottleneck;
        Self {
            proj_x_w: vec![0.0; d * cfg.dim_in],
            proj_x_b: vec![0.0; d],
            proj_t_w: vec![0.0; d * cfg.dim_t],
            proj_c_w: vec![0.0; d * cfg.dim_c],
            readout: vec![0.0; d],
            ln_gain: vec![0.0; d],
            ln_bias: vec![0.0; d],
            l_emb: vec![0.0; d],
            d_x: Matrix::zeros(n_tokens, cfg.dim_in),
        }
    }

    pub fn accumulate(&mut self, other: &RouterGrads) {
        let add = |a: &mut Vec<f64>, b: &[f64]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        };
        add(&mut self.proj_x_w, &other.proj_x_w);
        add(&mut self.proj_x_b, &other.proj_x_b);
        add(&mut self.proj_t_w, &other.proj_t_w);
        add(&mut self.proj_c_w, &other.proj_c_w);
        add(&mut self.readout, &other.readout);
        add(&mut self.ln_gain, &other.ln_gain);
        add(&mut self.ln_bias, &other.ln_bias);
        add(&mut self.l_emb, &other.l_emb);
    }
}

/// Intermediates cached by the forward pass for manual backprop.
#[derive(Debug, Clone)]
pub struct RouterCache {
    x: Matrix,
    t_emb: Option<Vec<f64>>,
    c_emb: Option<Vec<f64>>,
    has_l_emb: bool,
    /// Pre-activations a_i = ProjX x_i + h_ctx, per token.
    pre_act: Matrix,
    /// Normalized activations and per-token LayerNorm statistics.
    ln: Vec<LayerNormCache>,
}

fn scaled_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = if cols > 0 {
        1.0 / (cols as f64).sqrt()
    } else {
        0.0
    };
    (0..rows * cols).map(|_| rng.range(-bound, bound)).collect()
}

impl RouterParams {
    /// Fan-in scaled projections; the readout starts at zero so initial
    /// scores are flat and the first selections are unbiased.
    pub fn init(config: RouterConfig, rng: &mut Rng) -> Self {
        let d = config.bottleneck;
        Self {
            proj_x_w: scaled_uniform(rng, d, config.dim_in),
            proj_x_b: vec![0.0; d],
            proj_t_w: scaled_uniform(rng, d, config.dim_t),
            proj_c_w: scaled_uniform(rng, d, config.dim_c),
            readout: vec![0.0; d],
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
            config,
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj_x_w.len()
            + self.proj_x_b.len()
            + self.proj_t_w.len()
            + self.proj_c_w.len()
            + self.readout.len()
            + self.ln_gain.len()
            + self.ln_bias.len()
    }

    /// Serializes to versioned JSON: a `format_version` field followed by
    /// the config and flat row-major parameter arrays.
    pub fn save_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Versioned<'a> {
            format_version: u32,
            #[serde(flatten)]
            params: &'a RouterParams,
        }
        Ok(serde_json::to_string_pretty(&Versioned {
            format_version: ROUTER_FORMAT_VERSION,
            params: self,
        })?)
    }

    pub fn load_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Versioned {
            format_version: u32,
            #[serde(flatten)]
            params: RouterParams,
        }
        let v: Versioned = serde_json::from_str(text)?;
        if v.format_version != ROUTER_FORMAT_VERSION {
            return Err(ShivaError::invalid(format!(
                "unsupported router format version {}",
                v.format_version
            )));
        }
        let p = &v.params;
        let d = p.config.bottleneck;
        if p.proj_x_w.len() != d * p.config.dim_in
            || p.readout.len() != d
            || p.proj_t_w.len() != d * p.config.dim_t
            || p.proj_c_w.len() != d * p.config.dim_c
        {
            return Err(ShivaError::dims("router parameter layout".to_string()));
        }
        Ok(v.params)
    }
}

fn matvec_flat(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Scores a token matrix. Context vectors may be absent, contributing
/// nothing; `l_emb` must have bottleneck width when present. Returns the
/// scores and the cache for [`router_backward`].
pub fn router_forward(
    params: &RouterParams,
    x: &Matrix,
    t_emb: Option<&[f64]>,
    c_emb: Option<&[f64]>,
    l_emb: Option<&[f64]>,
) -> Result<(Vec<f64>, RouterCache)> {
    let cfg = &params.config;
    let d = cfg.bottleneck;
    if x.cols() != cfg.dim_in {
        return Err(ShivaError::dims(format!(
            "router_forward: token dim {} != {}",
            x.cols(),
            cfg.dim_in
        )));
    }
    if d < 2 {
        return Err(ShivaError::invalid(
            "bottleneck must be >= 2 for layer normalization".to_string(),
        ));
    }

    let mut h_ctx = vec![0.0; d];
    match (t_emb, cfg.dim_t) {
        (Some(t), dt) if t.len() == dt && dt > 0 => {
            matvec_flat(&params.proj_t_w, d, dt, t, &mut h_ctx)
        }
        (None, _) => {}
        _ => return Err(ShivaError::dims("router_forward: t_emb dimension".to_string())),
    }
    match (c_emb, cfg.dim_c) {
        (Some(c), dc) if c.len() == dc && dc > 0 => {
            matvec_flat(&params.proj_c_w, d, dc, c, &mut h_ctx)
        }
        (None, _) => {}
        _ => return Err(ShivaError::dims("router_forward: c_emb dimension".to_string())),
    }
    if let Some(l) = l_emb {
        if l.len() != d {
            return Err(ShivaError::dims(
                "router_forward: layer embedding width".to_string(),
            ));
        }
        for (h, lv) in h_ctx.iter_mut().zip(l) {
            *h += lv;
        }
    }

    let n = x.rows();
    let mut pre_act = Matrix::zeros(n, d);
    let mut ln = Vec::with_capacity(n);
    let mut scores = vec![0.0; n];
    for i in 0..n {
        let row = pre_act.row_mut(i);
        row.copy_from_slice(&h_ctx);
        matvec_flat(&params.proj_x_w, d, cfg.dim_in, x.row(i), row);
        for (r, b) in row.iter_mut().zip(&params.proj_x_b) {
            *r += b;
        }
        let activated: Vec<f64> = row.iter().map(|&a| silu(a)).collect();
        let (normed, cache) = layer_norm_with_cache(&activated)?;
        scores[i] = normed
            .iter()
            .zip(&params.readout)
            .zip(&params.ln_gain)
            .zip(&params.ln_bias)
            .map(|(((z, w), g), b)| w * (g * z + b))
            .sum();
        ln.push(cache);
    }

    Ok((
        scores,
        RouterCache {
            x: x.clone(),
            t_emb: t_emb.map(<[f64]>::to_vec),
            c_emb: c_emb.map(<[f64]>::to_vec),
            has_l_emb: l_emb.is_some(),
            pre_act,
            ln,
        },
    ))
}

/// Backpropagates dL/ds through the router, producing gradients for every
/// parameter, the layer embedding, and the token features.
pub fn router_backward(
    params: &RouterParams,
    cache: &RouterCache,
    dl_ds: &[f64],
) -> Result<RouterGrads> {
    let cfg = &params.config;
    let d = cfg.bottleneck;
    let n = cache.x.rows();
    if dl_ds.len() != n || cache.pre_act.rows() != n || cache.pre_act.cols() != d {
        return Err(ShivaError::contract(
            "router_backward: cache does not match the upstream gradient".to_string(),
        ));
    }

    let mut grads = RouterGrads::zeros(cfg, n);
    let mut d_hctx = vec![0.0; d];
    for i in 0..n {
        let ds = dl_ds[i];
        let z = &cache.ln[i].normalized;
        // Readout and affine parameters.
        let mut dz = vec![0.0; d];
        for j in 0..d {
            let w = params.readout[j];
            grads.readout[j] += ds * (params.ln_gain[j] * z[j] + params.ln_bias[j]);
            grads.ln_gain[j] += ds * w * z[j];
            grads.ln_bias[j] += ds * w;
            dz[j] = ds * w * params.ln_gain[j];
        }
        // Back through normalization and SiLU.
        let du = layer_norm_backward(&cache.ln[i], &dz);
        let a = cache.pre_act.row(i);
        let da: Vec<f64> = du.iter().zip(a).map(|(g, &av)| g * silu_prime(av)).collect();

        let xi = cache.x.row(i);
        for j in 0..d {
            grads.proj_x_b[j] += da[j];
            d_hctx[j] += da[j];
            let wrow = &mut grads.proj_x_w[j * cfg.dim_in..(j + 1) * cfg.dim_in];
            for (wg, &xv) in wrow.iter_mut().zip(xi) {
                *wg += da[j] * xv;
            }
        }
        let dx = grads.d_x.row_mut(i);
        for j in 0..d {
            let wrow = &params.proj_x_w[j * cfg.dim_in..(j + 1) * cfg.dim_in];
            for (dxv, &wv) in dx.iter_mut().zip(wrow) {
                *dxv += da[j] * wv;
            }
        }
    }

    // Shared context: each projection sees the summed token gradient.
    if let Some(t) = &cache.t_emb {
        for j in 0..d {
            let row = &mut grads.proj_t_w[j * cfg.dim_t..(j + 1) * cfg.dim_t];
            for (g, &tv) in row.iter_mut().zip(t) {
                *g += d_hctx[j] * tv;
            }
        }
    }
    if let Some(c) = &cache.c_emb {
        for j in 0..d {
            let row = &mut grads.proj_c_w[j * cfg.dim_c..(j + 1) * cfg.dim_c];
            for (g, &cv) in row.iter_mut().zip(c) {
                *g += d_hctx[j] * cv;
            }
        }
    }
    if cache.has_l_emb {
        grads.l_emb.copy_from_slice(&d_hctx);
    }
    Ok(grads)
}

/// Elementwise max of two score vectors, so both guidance branches select
/// the same indices: a token salient in either context stays in both.
pub fn unified_score(s_cond: &[f64], s_uncond: &[f64]) -> Result<Vec<f64>> {
    if s_cond.len() != s_uncond.len() {
        return Err(ShivaError::dims(format!(
            "unified_score: {} vs {}",
            s_cond.len(),
            s_uncond.len()
        )));
    }
    Ok(s_cond
        .iter()
        .zip(s_uncond)
        .map(|(a, b)| a.max(*b))
        .collect())
}

/// Router sharing strategy across a layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupSharing {
    /// One router for every layer.
    Global,
    /// Every two adjacent layers share a router (the default).
    Pairwise,
    /// Every three adjacent layers share a router.
    ThreeLayer,
    /// One router per layer.
    Independent,
}

impl GroupSharing {
    fn group_span(self) -> usize {
        match self {
            GroupSharing::Global => usize::MAX,
            GroupSharing::Pairwise => 2,
            GroupSharing::ThreeLayer => 3,
            GroupSharing::Independent => 1,
        }
    }
}

/// Routers shared across layer groups plus the per-layer identity
/// embeddings that let a shared router tell its layers apart.
#[derive(Debug, Clone)]
pub struct RouterGroupMap {
    pub n_layers: usize,
    pub sharing: GroupSharing,
    pub group_of: Vec<usize>,
    pub routers: Vec<RouterParams>,
    /// L x d' learnable layer embeddings (identity projection).
    pub layer_emb: Matrix,
}

impl RouterGroupMap {
    pub fn init(
        n_layers: usize,
        sharing: GroupSharing,
        config: RouterConfig,
        rng: &mut Rng,
    ) -> Self {
        let span = sharing.group_span();
        let group_of: Vec<usize> = (0..n_layers)
            .map(|l| if span == usize::MAX { 0 } else { l / span })
            .collect();
        let n_groups = group_of.last().map_or(0, |g| g + 1);
        let routers = (0..n_groups)
            .map(|_| RouterParams::init(config.clone(), rng))
            .collect();
        let layer_emb = Matrix::from_fn(n_layers, config.bottleneck, |_, _| {
            rng.gaussian(0.0, 0.01).expect("positive std")
        });
        Self {
            n_layers,
            sharing,
            group_of,
            routers,
            layer_emb,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.routers.len()
    }

    pub fn router_for_layer(&self, layer: usize) -> &RouterParams {
        &self.routers[self.group_of[layer]]
    }

    /// Total learnable parameters including the layer embedding table.
    pub fn param_count(&self) -> usize {
        self.routers.iter().map(RouterParams::param_count).sum::<usize>()
            + self.layer_emb.rows() * self.layer_emb.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{layer_norm, Rng};

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gaussian(0.0, 1.0).unwrap())
    }

    fn random_params(rng: &mut Rng, cfg: RouterConfig) -> RouterParams {
        let mut p = RouterParams::init(cfg, rng);
        // Tests need a non-degenerate readout and affine transform.
        for w in p.readout.iter_mut() {
            *w = rng.gaussian(0.0, 1.0).unwrap();
        }
        for g in p.ln_gain.iter_mut() {
            *g = 1.0 + rng.gaussian(0.0, 0.2).unwrap();
        }
        for b in p.ln_bias.iter_mut() {
            *b = rng.gaussian(0.0, 0.2).unwrap();
        }
        p
    }

    #[test]
    fn zero_readout_scores_zero() {
        let mut rng = Rng::new(1);
        let cfg = RouterConfig {
            dim_in: 5,
            dim_t: 0,
            dim_c: 0,
            bottleneck: 4,
        };
        let params = RouterParams::init(cfg, &mut rng);
        let x = random_matrix(&mut rng, 6, 5);
        let (scores, _) = router_forward(&params, &x, None, None, None).unwrap();
        assert_eq!(scores, vec![0.0; 6]);
    }

    #[test]
    fn identical_rows_identical_scores() {
        let mut rng = Rng::new(2);
        let cfg = RouterConfig {
            dim_in: 4,
            dim_t: 3,
            dim_c: 0,
            bottleneck: 6,
        };
        let params = random_params(&mut rng, cfg);
        let row: Vec<f64> = (0..4).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let x = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let t: Vec<f64> = (0..3).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let (scores, _) = router_forward(&params, &x, Some(&t), None, None).unwrap();
        assert_eq!(scores[0], scores[1]);
        assert_eq!(scores[1], scores[2]);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(3);
        let cfg = RouterConfig {
            dim_in: 4,
            dim_t: 0,
            dim_c: 2,
            bottleneck: 5,
        };
        let params = random_params(&mut rng, cfg);
        let x = random_matrix(&mut rng, 5, 4);
        let c: Vec<f64> = (0..2).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let (scores, _) = router_forward(&params, &x, None, Some(&c), None).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let xp = x.gather_rows(&perm).unwrap();
        let (scores_p, _) = router_forward(&params, &xp, None, Some(&c), None).unwrap();
        for (pos, &src) in perm.iter().enumerate() {
            assert_eq!(scores_p[pos], scores[src]);
        }
    }

    // With ProjX forced to zero every token sees only the shared context, so
    // all scores coincide and changing t_emb moves them together.
    #[test]
    fn shared_context_dominates_when_feature_path_is_zero() {
        let mut rng = Rng::new(4);
        let cfg = RouterConfig {
            dim_in: 4,
            dim_t: 3,
            dim_c: 0,
            bottleneck: 5,
        };
        let mut params = random_params(&mut rng, cfg);
        params.proj_x_w.iter_mut().for_each(|w| *w = 0.0);
        params.proj_x_b.iter_mut().for_each(|b| *b = 0.0);
        let x = random_matrix(&mut rng, 4, 4);
        let t1: Vec<f64> = (0..3).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let t2: Vec<f64> = (0..3).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let (s1, _) = router_forward(&params, &x, Some(&t1), None, None).unwrap();
        let (s2, _) = router_forward(&params, &x, Some(&t2), None, None).unwrap();
        for i in 1..4 {
            assert_eq!(s1[0], s1[i]);
            assert_eq!(s2[0], s2[i]);
        }
        assert_ne!(s1[0], s2[0]);
    }

    // Duplicate-implementation oracle: an independent straight-line
    // re-evaluation of the scoring formula.
    #[test]
    fn forward_matches_straight_line_reference() {
        let mut rng = Rng::new(5);
        let cfg = RouterConfig {
            dim_in: 8,
            dim_t: 3,
            dim_c: 2,
            bottleneck: 4,
        };
        let params = random_params(&mut rng, cfg);
        let x = random_matrix(&mut rng, 4, 8);
        let t: Vec<f64> = (0..3).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let c: Vec<f64> = (0..2).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let l: Vec<f64> = (0..4).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let (scores, _) =
            router_forward(&params, &x, Some(&t), Some(&c), Some(&l)).unwrap();

        for i in 0..4 {
            let d = 4;
            let mut a = vec![0.0; d];
            for j in 0..d {
                a[j] += params.proj_x_b[j] + l[j];
                for (dd, &xv) in x.row(i).iter().enumerate() {
                    a[j] += params.proj_x_w[j * 8 + dd] * xv;
                }
                for (dd, &tv) in t.iter().enumerate() {
                    a[j] += params.proj_t_w[j * 3 + dd] * tv;
                }
                for (dd, &cv) in c.iter().enumerate() {
                    a[j] += params.proj_c_w[j * 2 + dd] * cv;
                }
            }
            let act: Vec<f64> = a.iter().map(|&v| silu(v)).collect();
            let normed = layer_norm(&act).unwrap();
            let mut s = 0.0;
            for j in 0..d {
                s += params.readout[j] * (params.ln_gain[j] * normed[j] + params.ln_bias[j]);
            }
            assert!((s - scores[i]).abs() < 1e-12, "token {i}: {s} vs {}", scores[i]);
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let mut rng = Rng::new(6);
        let cfg = RouterConfig {
            dim_in: 3,
            dim_t: 2,
            dim_c: 0,
            bottleneck: 4,
        };
        let params = random_params(&mut rng, cfg);
        let x = random_matrix(&mut rng, 3, 3);
        let t = vec![0.5, -0.5];
        let (_, cache) = router_forward(&params, &x, Some(&t), None, None).unwrap();
        let grads = router_backward(&params, &cache, &[0.0, 0.0, 0.0]).unwrap();
        assert!(grads.proj_x_w.iter().all(|&g| g == 0.0));
        assert!(grads.readout.iter().all(|&g| g == 0.0));
        assert!(grads.d_x.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut rng = Rng::new(7);
        let cfg = RouterConfig {
            dim_in: 3,
            dim_t: 0,
            dim_c: 0,
            bottleneck: 4,
        };
        let params = random_params(&mut rng, cfg);
        let x = random_matrix(&mut rng, 3, 3);
        let (_, cache) = router_forward(&params, &x, None, None, None).unwrap();
        assert!(router_backward(&params, &cache, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn unified_score_examples() {
        assert_eq!(
            unified_score(&[1.0, 5.0], &[4.0, 2.0]).unwrap(),
            vec![4.0, 5.0]
        );
        let s = vec![0.3, -0.2];
        assert_eq!(unified_score(&s, &s).unwrap(), s);
        assert!(unified_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    // Selection consistency: the unified score yields one index set usable
    // for both guidance branches.
    #[test]
    fn unified_score_gives_shared_selection() {
        use crate::selection::hard_topk;
        let mut rng = Rng::new(8);
        let n = 12;
        let s_cond: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let s_uncond: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let unified = unified_score(&s_cond, &s_uncond).unwrap();
        let x = Matrix::zeros(n, 1);
        let a = hard_topk(&unified, 5, &x).unwrap();
        let b = hard_topk(&unified, 5, &x).unwrap();
        assert_eq!(a.indices_sel, b.indices_sel);
    }

    #[test]
    fn group_map_pairwise_assignment() {
        let mut rng = Rng::new(9);
        let cfg = RouterConfig {
            dim_in: 4,
            dim_t: 0,
            dim_c: 0,
            bottleneck: 4,
        };
        let map = RouterGroupMap::init(5, GroupSharing::Pairwise, cfg.clone(), &mut rng);
        assert_eq!(map.group_of, vec![0, 0, 1, 1, 2]);
        assert_eq!(map.n_groups(), 3);

        let global = RouterGroupMap::init(5, GroupSharing::Global, cfg.clone(), &mut rng);
        assert_eq!(global.n_groups(), 1);
        let indep = RouterGroupMap::init(5, GroupSharing::Independent, cfg.clone(), &mut rng);
        assert_eq!(indep.n_groups(), 5);
        let three = RouterGroupMap::init(5, GroupSharing::ThreeLayer, cfg, &mut rng);
        assert_eq!(three.group_of, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = Rng::new(10);
        let cfg = RouterConfig {
            dim_in: 3,
            dim_t: 2,
            dim_c: 0,
            bottleneck: 4,
        };
        let params = random_params(&mut rng, cfg);
        let json = params.save_json().unwrap();
        assert!(json.contains("\"format_version\": 1"));
        let loaded = RouterParams::load_json(&json).unwrap();
        assert_eq!(loaded.proj_x_w, params.proj_x_w);
        assert_eq!(loaded.readout, params.readout);

        let tampered = json.replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(RouterParams::load_json(&tampered).is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let mut rng = Rng::new(11);
        let cfg = RouterConfig {
            dim_in: 8,
            dim_t: 4,
            dim_c: 3,
            bottleneck: 6,
        };
        let params = RouterParams::init(cfg, &mut rng);
        // d'(D + dim_t + dim_c) weights + bias + readout + gain + bias.
        assert_eq!(params.param_count(), 6 * (8 + 4 + 3) + 6 * 4);
    }
}
