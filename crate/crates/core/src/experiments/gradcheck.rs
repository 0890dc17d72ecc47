//! Aggregated gradient verification: every module's analytic gradients
//! against central finite differences, plus the non-FD oracle checks, at
//! fixed seeds. One pass/fail line per check; the whole suite is the
//! `gradcheck` CLI command and backs the gradient-correctness acceptance
//! criterion.

use crate::block::{BlockStack, ForwardMode, RatioSource, StackConfig};
use crate::budget::BudgetTracker;
use crate::check::{max_grad_rel_err, rel_err};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::losses::normalized_distillation;
use crate::numeric::{Matrix, Rng};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::policy::{PolicyGrads, RatioPolicyConfig, RatioPolicyParams};
use crate::report::{CommandOutput, RunReport, Series};
use crate::router::{router_backward, router_forward, RouterConfig, RouterParams};
use crate::selection::{budget_grad, surrogate_grad_exact};
use crate::softrank::{
    chain_scores_grad, inclusion_grads, inclusion_prob, soft_rank, soft_rank_jacobian,
};

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, max_err: f64, tol: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            max_err,
            tol,
            passed: max_err <= tol,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {} (max_err={:.3e}, tol={:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_err,
            self.tol,
            self.detail
        )
    }
}

fn random_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gaussian(0.0, std).unwrap()).collect()
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gaussian(0.0, 1.0).unwrap())
}

/// Verifies a soft-rank Jacobian against finite differences. Exposed so a
/// corrupted-fixture test can confirm the checker actually detects sign
/// flips.
pub fn verify_jacobian_against_fd(scores: &[f64], tau: f64, jacobian: &Matrix) -> CheckResult {
    let n = scores.len();
    let h = 1e-6;
    let mut max_abs: f64 = 0.0;
    for m in 0..n {
        let mut plus = scores.to_vec();
        let mut minus = scores.to_vec();
        plus[m] += h;
        minus[m] -= h;
        let rp = soft_rank(&plus, tau).unwrap().ranks;
        let rm = soft_rank(&minus, tau).unwrap().ranks;
        for i in 0..n {
            let fd = (rp[i] - rm[i]) / (2.0 * h);
            max_abs = max_abs.max((fd - jacobian.get(i, m)).abs());
        }
    }
    CheckResult::new("softrank_jacobian_fd", max_abs, 1e-5, format!("N={n}"))
}

fn check_softrank_jacobian() -> CheckResult {
    let mut rng = Rng::new(101);
    let scores = random_vec(&mut rng, 8, 1.0);
    let state = soft_rank(&scores, 0.25).unwrap();
    verify_jacobian_against_fd(&scores, 0.25, &soft_rank_jacobian(&state))
}

fn check_jacobian_structure() -> CheckResult {
    let mut rng = Rng::new(102);
    let mut worst: f64 = 0.0;
    let mut sign_violations = 0usize;
    for _ in 0..25 {
        let n = 2 + rng.below(30);
        // Gap/temperature ratio stays below sigmoid's f64 saturation point
        // so the strict sign structure is representable.
        let scores = random_vec(&mut rng, n, 1.0);
        let state = soft_rank(&scores, 0.3).unwrap();
        let jac = soft_rank_jacobian(&state);
        for i in 0..n {
            let mut row = 0.0;
            for m in 0..n {
                let v = jac.get(i, m);
                row += v;
                if (i == m && v >= 0.0) || (i != m && v <= 0.0) {
                    sign_violations += 1;
                }
            }
            worst = worst.max(row.abs());
        }
    }
    let mut result = CheckResult::new(
        "softrank_jacobian_structure",
        worst,
        1e-10,
        format!("sign violations: {sign_violations}"),
    );
    result.passed = result.passed && sign_violations == 0;
    result
}

fn check_inclusion_dk() -> CheckResult {
    let mut rng = Rng::new(103);
    let scores = random_vec(&mut rng, 10, 1.0);
    let state = soft_rank(&scores, 0.2).unwrap();
    let k = 5.0;
    let probs = inclusion_prob(&state, k, 0.1, true).unwrap();
    let (_, dpi_dk) = inclusion_grads(&probs);
    let h = 1e-6;
    let plus = inclusion_prob(&state, k + h, 0.1, true).unwrap();
    let minus = inclusion_prob(&state, k - h, 0.1, true).unwrap();
    let mut max_abs: f64 = 0.0;
    for i in 0..10 {
        let fd = (plus.probs[i] - minus.probs[i]) / (2.0 * h);
        max_abs = max_abs.max((fd - dpi_dk[i]).abs());
    }
    CheckResult::new("inclusion_dk_fd", max_abs, 1e-6, "N=10, normalized")
}

fn check_chain_scores() -> CheckResult {
    let mut rng = Rng::new(104);
    let n = 6;
    let scores = random_vec(&mut rng, n, 1.0);
    let upstream = random_vec(&mut rng, n, 1.0);
    let (tau_rank, k, tau_sel) = (0.3, 3.0, 0.2);
    let state = soft_rank(&scores, tau_rank).unwrap();
    let probs = inclusion_prob(&state, k, tau_sel, false).unwrap();
    let grad = chain_scores_grad(&upstream, &probs, &state).unwrap();

    let loss = |s: &[f64]| {
        let st = soft_rank(s, tau_rank).unwrap();
        let pr = inclusion_prob(&st, k, tau_sel, false).unwrap();
        pr.probs.iter().zip(&upstream).map(|(p, u)| p * u).sum::<f64>()
    };
    let h = 1e-6;
    let mut max_abs: f64 = 0.0;
    for m in 0..n {
        let mut plus = scores.clone();
        let mut minus = scores.clone();
        plus[m] += h;
        minus[m] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        max_abs = max_abs.max((fd - grad[m]).abs());
    }
    CheckResult::new("chain_scores_fd", max_abs, 1e-5, "N=6 end-to-end")
}

fn check_router_backward() -> CheckResult {
    let mut rng = Rng::new(105);
    let cfg = RouterConfig {
        dim_in: 6,
        dim_t: 3,
        dim_c: 2,
        bottleneck: 4,
    };
    let mut params = RouterParams::init(cfg, &mut rng);
    for w in params.readout.iter_mut() {
        *w = rng.gaussian(0.0, 1.0).unwrap();
    }
    let x = random_matrix(&mut rng, 3, 6);
    let t = random_vec(&mut rng, 3, 1.0);
    let c = random_vec(&mut rng, 2, 1.0);
    let l = random_vec(&mut rng, 4, 1.0);
    let upstream = random_vec(&mut rng, 3, 1.0);

    let (_, cache) = router_forward(&params, &x, Some(&t), Some(&c), Some(&l)).unwrap();
    let grads = router_backward(&params, &cache, &upstream).unwrap();

    // Flatten (params | l_emb | x) so one sweep covers parameters and
    // both non-parameter inputs.
    let mut flat = Vec::new();
    flat.extend_from_slice(&params.proj_x_w);
    flat.extend_from_slice(&params.proj_x_b);
    flat.extend_from_slice(&params.proj_t_w);
    flat.extend_from_slice(&params.proj_c_w);
    flat.extend_from_slice(&params.readout);
    flat.extend_from_slice(&params.ln_gain);
    flat.extend_from_slice(&params.ln_bias);
    flat.extend_from_slice(&l);
    flat.extend_from_slice(x.data());

    let mut analytic = Vec::new();
    analytic.extend_from_slice(&grads.proj_x_w);
    analytic.extend_from_slice(&grads.proj_x_b);
    analytic.extend_from_slice(&grads.proj_t_w);
    analytic.extend_from_slice(&grads.proj_c_w);
    analytic.extend_from_slice(&grads.readout);
    analytic.extend_from_slice(&grads.ln_gain);
    analytic.extend_from_slice(&grads.ln_bias);
    analytic.extend_from_slice(&grads.l_emb);
    analytic.extend_from_slice(grads.d_x.data());

    let n_params = flat.len();
    let err = max_grad_rel_err(&flat, &analytic, 1e-5, |probe| {
        let mut p = params.clone();
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = probe[pos..pos + n].to_vec();
            pos += n;
            s
        };
        p.proj_x_w = take(params.proj_x_w.len());
        p.proj_x_b = take(params.proj_x_b.len());
        p.proj_t_w = take(params.proj_t_w.len());
        p.proj_c_w = take(params.proj_c_w.len());
        p.readout = take(params.readout.len());
        p.ln_gain = take(params.ln_gain.len());
        p.ln_bias = take(params.ln_bias.len());
        let l_probe = take(4);
        let x_probe = Matrix::from_vec(3, 6, take(18)).unwrap();
        let (scores, _) =
            router_forward(&p, &x_probe, Some(&t), Some(&c), Some(&l_probe)).unwrap();
        scores.iter().zip(&upstream).map(|(s, u)| s * u).sum()
    });
    CheckResult::new(
        "router_backward_fd",
        err,
        1e-4,
        format!("D=6, d'=4, N=3, {n_params} slots"),
    )
}

fn check_policy_backward() -> CheckResult {
    let mut rng = Rng::new(106);
    let cfg = RatioPolicyConfig {
        n_layers: 3,
        emb_dim: 5,
        hidden: 4,
        time_freqs: 3,
        max_period: 100.0,
        r_target: 0.6,
    };
    let mut policy = RatioPolicyParams::init(cfg, &mut rng).unwrap();
    let mut g = PolicyGrads::zeros(&policy.config);
    for v in g.layer_branch.w2.iter_mut().chain(g.time_branch.w2.iter_mut()) {
        *v = rng.gaussian(0.0, 0.5).unwrap();
    }
    policy.apply_update(&g, 1.0);

    let (t, layer) = (21.0, 1);
    let (_, _, cache) = policy.forward(t, layer, 0.0, None).unwrap();
    let grads = policy.backward(&cache, 1.0).unwrap();
    let flat = policy.flatten();
    let analytic = RatioPolicyParams::flatten_grads(&grads);
    let err = max_grad_rel_err(&flat, &analytic, 1e-5, |probe| {
        let p = policy.unflatten(probe).unwrap();
        let (_, r, _) = p.forward(t, layer, 0.0, None).unwrap();
        r
    });
    CheckResult::new("policy_backward_fd", err, 1e-4, "tiny config, all params")
}

fn check_stack_surrogate() -> CheckResult {
    let mut rng = Rng::new(107);
    let mut cfg = StackConfig::new(2, 4);
    cfg.bottleneck = 4;
    cfg.hidden = 5;
    let mut stack = BlockStack::init(cfg, &mut rng).unwrap();
    for r in &mut stack.routers.routers {
        for w in r.readout.iter_mut() {
            *w = rng.gaussian(0.0, 0.5).unwrap();
        }
    }
    let mut g = PolicyGrads::zeros(&stack.policy.config);
    for v in g.layer_branch.w2.iter_mut().chain(g.time_branch.w2.iter_mut()) {
        *v = rng.gaussian(0.0, 0.1).unwrap();
    }
    stack.policy.apply_update(&g, 1.0);

    let x = random_matrix(&mut rng, 5, 4);
    let target = random_matrix(&mut rng, 5, 4);
    let t = 12.0;
    let ratio = RatioSource::Policy { noise_std: 0.0 };

    let (out, trace) = stack
        .forward(&x, t, ForwardMode::Surrogate, &ratio, None)
        .unwrap();
    let dl = Matrix::from_fn(5, 4, |r, c| 2.0 * (out.get(r, c) - target.get(r, c)));
    let grads = stack.backward(&trace, &dl).unwrap();

    let flat = stack.flatten_params();
    let analytic = stack.flatten_grads(&grads);
    let err = max_grad_rel_err(&flat, &analytic, 1e-5, |probe| {
        let s = stack.unflatten_params(probe).unwrap();
        let (o, _) = s.forward(&x, t, ForwardMode::Surrogate, &ratio, None).unwrap();
        o.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    });
    CheckResult::new(
        "stack_surrogate_fd",
        err,
        1e-4,
        format!("N=5, D=4, L=2, {} slots", flat.len()),
    )
}

fn check_distillation() -> CheckResult {
    let mut rng = Rng::new(108);
    let student = random_matrix(&mut rng, 3, 5);
    let teacher = random_matrix(&mut rng, 3, 5);
    let (_, grad) = normalized_distillation(&student, &teacher).unwrap();
    let err = max_grad_rel_err(student.data(), grad.data(), 1e-5, |probe| {
        let s = Matrix::from_vec(3, 5, probe.to_vec()).unwrap();
        normalized_distillation(&s, &teacher).unwrap().0
    });
    CheckResult::new("distillation_fd", err, 1e-4, "3x5 features")
}

fn check_budget_loss() -> CheckResult {
    let mut tracker = BudgetTracker::new(0.2, 0.6, 0.7).unwrap();
    tracker.mu_global = 0.75;
    let r = 0.5;
    let (_, grad) = tracker.budget_loss(r);
    let h = 1e-6;
    let fd = (tracker.budget_loss(r + h).0 - tracker.budget_loss(r - h).0) / (2.0 * h);
    CheckResult::new("budget_loss_fd", (fd - grad).abs(), 1e-10, "mu frozen")
}

fn check_budget_grad() -> CheckResult {
    let mut rng = Rng::new(109);
    let n = 12;
    let scores = random_vec(&mut rng, n, 1.0);
    let upstream = random_vec(&mut rng, n, 1.0);
    let state = soft_rank(&scores, 0.2).unwrap();
    let k = 6.0;
    let probs = inclusion_prob(&state, k, 0.3, false).unwrap();
    let (_, dpi_dk) = inclusion_grads(&probs);
    let analytic = budget_grad(&upstream, &dpi_dk).unwrap();

    let relaxed_loss = |kv: f64| {
        let pr = inclusion_prob(&state, kv, 0.3, false).unwrap();
        pr.probs.iter().zip(&upstream).map(|(p, u)| p * u).sum::<f64>()
    };
    let h = 1e-6;
    let fd = (relaxed_loss(k + h) - relaxed_loss(k - h)) / (2.0 * h);
    CheckResult::new("budget_grad_fd", (fd - analytic).abs(), 1e-6, "relaxed loss in k")
}

fn check_surrogate_exact() -> CheckResult {
    let mut rng = Rng::new(110);
    let (n, d) = (5, 4);
    let x = random_matrix(&mut rng, n, d);
    let w = random_matrix(&mut rng, d, d);
    let target = random_matrix(&mut rng, n, d);
    let scores = random_vec(&mut rng, n, 1.0);
    let state = soft_rank(&scores, 0.2).unwrap();
    let probs = inclusion_prob(&state, 2.5, 0.3, false).unwrap();
    let pi = probs.probs.clone();

    // Gating model: out_i = B(pi x_i) + (1 - pi) x_i with B(z) = z + W z;
    // loss = ||out - target||^2. Both path gradients are available, so the
    // exact surrogate gradient must match finite differences in pi.
    let forward = |pi: &[f64]| -> (Matrix, Matrix) {
        let mut out = Matrix::zeros(n, d);
        let mut block_in = Matrix::zeros(n, d);
        for i in 0..n {
            for c in 0..d {
                block_in.set(i, c, pi[i] * x.get(i, c));
            }
            let z = block_in.row(i).to_vec();
            let wz = w.matvec(&z).unwrap();
            for c in 0..d {
                out.set(i, c, z[c] + wz[c] + (1.0 - pi[i]) * x.get(i, c));
            }
        }
        (out, block_in)
    };
    let loss_of = |pi: &[f64]| -> f64 {
        let (out, _) = forward(pi);
        out.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };

    let (out, _) = forward(&pi);
    let mut grad_sel = Matrix::zeros(n, d);
    let mut grad_rej = Matrix::zeros(n, d);
    for i in 0..n {
        let g: Vec<f64> = (0..d)
            .map(|c| 2.0 * (out.get(i, c) - target.get(i, c)))
            .collect();
        // dL/d(block input) = g + W^T g; dL/d(skip input) = g.
        let wtg = w.matvec_t(&g).unwrap();
        for c in 0..d {
            grad_sel.set(i, c, g[c] + wtg[c]);
            grad_rej.set(i, c, g[c]);
        }
    }
    let exact = surrogate_grad_exact(&grad_sel, &grad_rej, &x).unwrap();

    let h = 1e-6;
    let mut max_abs: f64 = 0.0;
    for i in 0..n {
        let mut plus = pi.clone();
        let mut minus = pi.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        max_abs = max_abs.max((fd - exact[i]).abs());
    }
    CheckResult::new("surrogate_exact_fd", max_abs, 1e-5, "gating model, N=5 D=4")
}

fn check_adam_reference() -> CheckResult {
    let hp = AdamParams::new(0.07);
    let mut rng = Rng::new(111);
    let mut p = vec![0.3];
    let mut st = AdamState::new(1);
    let (mut m, mut v, mut t) = (0.0f64, 0.0f64, 0i32);
    let mut ref_p = 0.3;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let g = rng.gaussian(0.0, 1.0).unwrap();
        adam_step(&mut p, &[g], &hp, &mut st).unwrap();
        t += 1;
        m = hp.beta1 * m + (1.0 - hp.beta1) * g;
        v = hp.beta2 * v + (1.0 - hp.beta2) * g * g;
        let mh = m / (1.0 - hp.beta1.powi(t));
        let vh = v / (1.0 - hp.beta2.powi(t));
        ref_p -= hp.lr * mh / (vh.sqrt() + hp.eps);
        worst = worst.max((p[0] - ref_p).abs());
    }
    CheckResult::new("adam_reference_trace", worst, 1e-12, "10-step duplicate impl")
}

fn check_elementary_grid() -> CheckResult {
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let x = -30.0 + 60.0 * (i as f64) / 999.0;
        let reference = 1.0 / (1.0 + (-x).exp());
        worst = worst.max(rel_err(crate::numeric::sigmoid(x), reference));
        if x != 0.0 {
            worst = worst.max(rel_err(crate::numeric::silu(x), x * reference));
        }
    }
    CheckResult::new("elementary_grid_oracle", worst, 1e-12, "1000 pts in [-30, 30]")
}

/// Runs every check at fixed seeds.
pub fn all_checks() -> Vec<CheckResult> {
    vec![
        check_softrank_jacobian(),
        check_jacobian_structure(),
        check_inclusion_dk(),
        check_chain_scores(),
        check_router_backward(),
        check_policy_backward(),
        check_stack_surrogate(),
        check_distillation(),
        check_budget_loss(),
        check_budget_grad(),
        check_surrogate_exact(),
        check_adam_reference(),
        check_elementary_grid(),
    ]
}

pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let checks = all_checks();
    let mut series = Series::new(&["check", "max_err", "tol", "passed"]);
    let mut report = RunReport::new("gradcheck", cfg);
    let mut failures = 0usize;
    for (i, c) in checks.iter().enumerate() {
        series.push(vec![
            i as f64,
            c.max_err,
            c.tol,
            if c.passed { 1.0 } else { 0.0 },
        ]);
        report.note(c.line());
        if !c.passed {
            failures += 1;
        }
    }
    report.put("checks", checks.len() as f64);
    report.put("failures", failures as f64);
    Ok(CommandOutput::new(report, series))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_suite_is_green() {
        for c in all_checks() {
            assert!(c.passed, "{}", c.line());
        }
    }

    // Mutation check: a corrupted Jacobian must be detected.
    #[test]
    fn corrupted_jacobian_is_detected() {
        let mut rng = Rng::new(200);
        let scores = random_vec(&mut rng, 6, 1.0);
        let state = soft_rank(&scores, 0.25).unwrap();
        let mut jac = soft_rank_jacobian(&state);
        let clean = verify_jacobian_against_fd(&scores, 0.25, &jac);
        assert!(clean.passed);
        // Flip the sign of one off-diagonal entry.
        jac.set(0, 1, -jac.get(0, 1));
        let corrupted = verify_jacobian_against_fd(&scores, 0.25, &jac);
        assert!(!corrupted.passed, "sign corruption must be caught");
    }
}
