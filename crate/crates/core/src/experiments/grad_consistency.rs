//! Monte Carlo comparison of the single-path estimator against the exact
//! two-path surrogate gradient.
//!
//! Each trial samples token features, scores, and per-path loss gradients
//! (all N(0, 1); the skip-path gradient scaled by `gc_rej_scale`), selects
//! the top `gc_keep_fraction * N` tokens, and records the cosine between
//! the single-path estimate and the exact surrogate gradient. The sampled
//! distributions are echoed in the report so the acceptance band stays
//! interpretable.

use crate::config::ExperimentConfig;
use crate::error::{Result, ShivaError};
use crate::numeric::{dot, Matrix, Rng};
use crate::report::{CommandOutput, RunReport, Series};
use crate::selection::{hard_topk, residual_ste_grad, surrogate_grad_exact, PathGradients};
use crate::svg::histogram;

/// Binned counts of the cosine sample as CSV.
fn histogram_csv(values: &[f64], bins: usize) -> String {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (b, &c) in counts.iter().enumerate() {
        let bin_lo = lo + width * b as f64;
        let bin_hi = lo + width * (b + 1) as f64;
        out.push_str(&format!("{bin_lo},{bin_hi},{c}\n"));
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

pub fn run_grad_consistency(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    if cfg.trials < 1000 {
        return Err(ShivaError::invalid(format!(
            "grad_consistency requires >= 1000 trials, got {}",
            cfg.trials
        )));
    }
    if !(0.0 < cfg.gc_keep_fraction && cfg.gc_keep_fraction <= 1.0) {
        return Err(ShivaError::invalid(
            "gc_keep_fraction must lie in (0, 1]".to_string(),
        ));
    }
    let n = cfg.gc_n;
    let d = cfg.gc_d;
    let k = ((cfg.gc_keep_fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = Rng::new(cfg.seed);

    let mut series = Series::new(&["trial", "cosine"]);
    let mut cosines = Vec::with_capacity(cfg.trials);
    let mut resampled = 0usize;

    for trial in 0..cfg.trials {
        // Per-trial child stream keeps trials order-independent.
        let mut trial_rng = rng.fork(trial as u64);
        let (estimate, exact) = loop {
            let x = Matrix::from_fn(n, d, |_, _| trial_rng.gaussian(0.0, 1.0).unwrap());
            let scores: Vec<f64> =
                (0..n).map(|_| trial_rng.gaussian(0.0, 1.0).unwrap()).collect();
            let grad_sel = Matrix::from_fn(n, d, |_, _| trial_rng.gaussian(0.0, 1.0).unwrap());
            let grad_rej = Matrix::from_fn(n, d, |_, _| {
                cfg.gc_rej_scale * trial_rng.gaussian(0.0, 1.0).unwrap()
            });

            let outcome = hard_topk(&scores, k, &x)?;
            let paths = PathGradients {
                grad_sel: grad_sel.gather_rows(&outcome.indices_sel)?,
                grad_rej: grad_rej.gather_rows(&outcome.indices_rej)?,
            };
            let estimate = residual_ste_grad(&paths, &outcome, &x)?;
            let exact = surrogate_grad_exact(&grad_sel, &grad_rej, &x)?;
            match cosine(&estimate, &exact) {
                Some(_) => break (estimate, exact),
                None => resampled += 1, // degenerate zero vector; redraw
            }
        };
        let c = cosine(&estimate, &exact).expect("checked above");
        cosines.push(c);
        series.push(vec![trial as f64, c]);
    }

    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    let var = cosines.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
        / (cosines.len() - 1) as f64;
    let min = cosines.iter().copied().fold(f64::INFINITY, f64::min);
    let positive = cosines.iter().filter(|&&c| c > 0.0).count();

    let mut report = RunReport::new("grad_consistency", cfg);
    report.put("mean_cosine", mean);
    report.put("std_cosine", var.sqrt());
    report.put("min_cosine", min);
    report.put("fraction_positive", positive as f64 / cosines.len() as f64);
    report.put("resampled_trials", resampled as f64);
    report.put("k", k as f64);
    report.note(format!(
        "features, scores, and selected-path gradients ~ N(0,1) over {n}x{d}; \
         skip-path gradients scaled by {}",
        cfg.gc_rej_scale
    ));

    let svg = histogram("estimator/exact cosine similarity", "cosine", &cosines, 40);
    let mut out = CommandOutput::new(report, series);
    out.plot_svg = Some(svg);
    out.extra_files
        .push(("hist.csv".to_string(), histogram_csv(&cosines, 40)));
    Ok(out)
}
