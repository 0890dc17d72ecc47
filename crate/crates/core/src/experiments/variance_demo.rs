//! Variance comparison of uniform vs stratified timestep sampling on
//! configurable ratio profiles.
//!
//! Runs the variance decomposition `repetitions` times per profile
//! (constant, linear, sigmoid schedule) and tabulates measured variances
//! against the quadrature predictions from the law of total variance.

use crate::budget::variance_decomposition;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::numeric::{sigmoid, Rng};
use crate::report::{CommandOutput, RunReport, Series};
use crate::svg::line_chart;

type RatioProfile = Box<dyn Fn(f64) -> f64>;

/// The ratio profiles the demo sweeps. Index is the `profile` column in
/// the series.
fn profiles(t_max: f64) -> Vec<(&'static str, RatioProfile)> {
    vec![
        ("constant", Box::new(|_| 0.6)),
        ("linear", Box::new(move |t: f64| t / t_max)),
        (
            "sigmoid_schedule",
            Box::new(move |t: f64| 0.3 + 0.5 * sigmoid(8.0 * (t / t_max - 0.5))),
        ),
    ]
}

pub fn run_variance_demo(cfg: &ExperimentConfig) -> Result<CommandOutput> {
    let mut rng = Rng::new(cfg.seed);
    let mut series = Series::new(&[
        "profile",
        "repetition",
        "var_uniform",
        "var_stratified",
        "delta_var",
        "ratio",
    ]);
    let mut report = RunReport::new("variance_demo", cfg);

    for (pi, (name, profile)) in profiles(cfg.t_max).iter().enumerate() {
        let mut strat_wins = 0usize;
        let mut sum_delta = 0.0;
        let mut sum_uni = 0.0;
        let mut sum_strat = 0.0;
        let mut last = None;
        for rep in 0..cfg.repetitions {
            let mut rep_rng = rng.fork((pi * 100_000 + rep) as u64);
            let r = variance_decomposition(
                profile.as_ref(),
                cfg.strata,
                cfg.t_max,
                cfg.trials,
                &mut rep_rng,
            )?;
            if r.var_stratified < r.var_uniform {
                strat_wins += 1;
            }
            sum_delta += r.delta_var;
            sum_uni += r.var_uniform;
            sum_strat += r.var_stratified;
            series.push(vec![
                pi as f64,
                rep as f64,
                r.var_uniform,
                r.var_stratified,
                r.delta_var,
                r.var_stratified / r.var_uniform.max(1e-300),
            ]);
            last = Some(r);
        }
        let reps = cfg.repetitions.max(1) as f64;
        let quad = last.expect("at least one repetition");
        report.put(&format!("{name}_wins"), strat_wins as f64);
        report.put(&format!("{name}_var_uniform"), sum_uni / reps);
        report.put(&format!("{name}_var_stratified"), sum_strat / reps);
        report.put(&format!("{name}_delta_var"), sum_delta / reps);
        report.put(&format!("{name}_delta_var_pred"), quad.delta_var_pred);
        report.put(&format!("{name}_var_uniform_pred"), quad.var_uniform_pred);
        report.put(&format!("{name}_between_stratum"), quad.between_stratum);
        report.put(&format!("{name}_within_stratum"), quad.within_stratum);
        report.put(&format!("{name}_sigma_sq"), quad.sigma_sq);
        // Side-by-side quadrature JSON for the decomposition interface.
        report.note(format!(
            "{name}: {}",
            serde_json::to_string(&quad)?
        ));
    }

    let profile_names: Vec<String> = profiles(cfg.t_max)
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    report.note(format!("profiles: {}", profile_names.join(", ")));

    // Plot the measured ratio per repetition for each profile.
    let mut plot_series = Vec::new();
    for (pi, name) in profile_names.iter().enumerate() {
        let pts: Vec<(f64, f64)> = series
            .rows
            .iter()
            .filter(|r| r[0] as usize == pi)
            .map(|r| (r[1], r[5]))
            .collect();
        plot_series.push((name.clone(), pts));
    }
    let svg = line_chart(
        "var(stratified) / var(uniform)",
        "repetition",
        "ratio",
        &plot_series,
    );

    let mut out = CommandOutput::new(report, series);
    out.plot_svg = Some(svg);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_profile_wins_every_repetition() {
        let mut cfg = ExperimentConfig::default();
        cfg.trials = 1000;
        cfg.repetitions = 10;
        let out = run_variance_demo(&cfg).unwrap();
        assert_eq!(out.report.get("linear_wins").unwrap(), 10.0);
        // Strong reduction for the linear profile at B = 16.
        let uni = out.report.get("linear_var_uniform").unwrap();
        let strat = out.report.get("linear_var_stratified").unwrap();
        assert!(strat / uni < 0.2, "ratio {}", strat / uni);
    }

    #[test]
    fn constant_profile_has_ratio_near_one_in_value() {
        let mut cfg = ExperimentConfig::default();
        cfg.trials = 1000;
        cfg.repetitions = 3;
        let out = run_variance_demo(&cfg).unwrap();
        // Constant profile: both variances vanish (up to the rounding of
        // the sample mean), so stratification neither helps nor hurts.
        assert!(out.report.get("constant_var_uniform").unwrap() < 1e-25);
        assert!(out.report.get("constant_var_stratified").unwrap() < 1e-25);
        assert!(out.report.get("constant_delta_var_pred").unwrap() < 1e-25);
    }

    #[test]
    fn measured_delta_matches_quadrature() {
        let mut cfg = ExperimentConfig::default();
        cfg.trials = 4000;
        cfg.repetitions = 20;
        let out = run_variance_demo(&cfg).unwrap();
        let measured = out.report.get("linear_delta_var").unwrap();
        let predicted = out.report.get("linear_delta_var_pred").unwrap();
        assert!(
            (measured - predicted).abs() / predicted < 0.1,
            "{measured} vs {predicted}"
        );
    }
}
