//! EMA-stabilized budget constraint and stratified sampling.
//!
//! The budget loss is a proxy-linear penalty: the gradient on the batch
//! mean retention ratio is `lambda * 2 * (mu_global - r_target)`, where
//! `mu_global` is an exponential moving average updated before the loss is
//! evaluated and held constant under differentiation (stop-gradient). The
//! factor 2 is kept literal - it is the derivative of the squared penalty
//! the proxy stands in for - so penalty weights stay comparable across
//! formulations.
//!
//! Stratified sampling draws one point per equi-width stratum, removing the
//! between-stratum component from the variance of the batch mean. The
//! decomposition analyzer measures both estimators by Monte Carlo and
//! predicts them by quadrature through the law of total variance.

use crate::error::{Result, ShivaError};
use crate::numeric::Rng;
use serde::{Deserialize, Serialize};

/// Long-run retention tracker with penalty configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetTracker {
    /// EMA of the batch-mean retention ratio, initialized at the target so
    /// step zero carries no gradient.
    pub mu_global: f64,
    /// EMA momentum on the newest batch.
    pub beta: f64,
    pub r_target: f64,
    pub lambda: f64,
}

impl BudgetTracker {
    pub fn new(beta: f64, r_target: f64, lambda: f64) -> Result<Self> {
        if !(0.0 < beta && beta <= 1.0) {
            return Err(ShivaError::invalid(format!(
                "beta must lie in (0, 1], got {beta}"
            )));
        }
        if !(0.0..=1.0).contains(&r_target) {
            return Err(ShivaError::invalid(format!(
                "r_target must lie in [0, 1], got {r_target}"
            )));
        }
        Ok(Self {
            mu_global: r_target,
            beta,
            r_target,
            lambda,
        })
    }

    /// mu <- beta * r_bar + (1 - beta) * mu.
    pub fn ema_update(&mut self, r_bar_batch: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&r_bar_batch) {
            return Err(ShivaError::invalid(format!(
                "r_bar_batch must lie in [0, 1], got {r_bar_batch}"
            )));
        }
        self.mu_global = self.beta * r_bar_batch + (1.0 - self.beta) * self.mu_global;
        Ok(())
    }

    /// Proxy linear budget loss and its gradient on r_bar. Gradient flows
    /// only through the r_bar factor; the bracketed deviation term is a
    /// constant under differentiation.
    pub fn budget_loss(&self, r_bar_batch: f64) -> (f64, f64) {
        let direction = 2.0 * (self.mu_global - self.r_target);
        let loss = self.lambda * r_bar_batch * direction;
        let grad = self.lambda * direction;
        (loss, grad)
    }

    /// EMA update followed by the loss at the updated average, the order
    /// the training step uses.
    pub fn update_and_loss(&mut self, r_bar_batch: f64) -> Result<(f64, f64)> {
        self.ema_update(r_bar_batch)?;
        Ok(self.budget_loss(r_bar_batch))
    }
}

/// One timestep draw per equi-width stratum over [0, T).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifiedPlan {
    pub strata: usize,
    pub t_max: f64,
    /// `draws[i]` lies in `[i*T/B, (i+1)*T/B)`; ordered by stratum.
    pub draws: Vec<f64>,
}

pub fn stratified_timesteps(strata: usize, t_max: f64, rng: &mut Rng) -> Result<StratifiedPlan> {
    if strata == 0 {
        return Err(ShivaError::invalid("strata count must be >= 1".to_string()));
    }
    if t_max <= 0.0 || !t_max.is_finite() {
        return Err(ShivaError::invalid(format!(
            "t_max must be positive, got {t_max}"
        )));
    }
    let width = t_max / strata as f64;
    let draws = (0..strata)
        .map(|i| {
            let lo = i as f64 * width;
            lo + width * rng.uniform()
        })
        .collect();
    Ok(StratifiedPlan {
        strata,
        t_max,
        draws,
    })
}

/// K retention ratios, one per disjoint interval spanning [r_min, r_max].
pub fn stratified_ratios(k: usize, r_min: f64, r_max: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(ShivaError::invalid("ratio group count must be >= 1".to_string()));
    }
    if !(0.0 < r_min && r_min < r_max && r_max <= 1.0) {
        return Err(ShivaError::invalid(format!(
            "ratio range must satisfy 0 < r_min < r_max <= 1, got [{r_min}, {r_max}]"
        )));
    }
    let width = (r_max - r_min) / k as f64;
    Ok((0..k)
        .map(|i| r_min + width * (i as f64 + rng.uniform()))
        .collect())
}

/// Measured and predicted variances of the two batch-mean estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub strata: usize,
    pub trials: usize,
    /// Quadrature mean of r(t) over [0, T].
    pub mu: f64,
    /// Quadrature total variance of r(t).
    pub sigma_sq: f64,
    /// Average within-stratum variance (law of total variance term).
    pub within_stratum: f64,
    /// Between-stratum variance (the component stratification removes).
    pub between_stratum: f64,
    /// Monte Carlo variance of the uniform-sampling batch mean.
    pub var_uniform: f64,
    /// Monte Carlo variance of the stratified batch mean.
    pub var_stratified: f64,
    pub delta_var: f64,
    /// sigma^2 / B.
    pub var_uniform_pred: f64,
    /// within / B.
    pub var_stratified_pred: f64,
    /// between / B.
    pub delta_var_pred: f64,
}

/// Grid points per stratum for the quadrature side of the report.
const QUADRATURE_POINTS_PER_STRATUM: usize = 4096;

/// Monte Carlo + quadrature variance decomposition for a ratio profile
/// r(t) on [0, T] with B strata.
pub fn variance_decomposition(
    r_fn: impl Fn(f64) -> f64,
    strata: usize,
    t_max: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<VarianceReport> {
    if trials < 1000 {
        return Err(ShivaError::invalid(format!(
            "variance decomposition needs >= 1000 trials, got {trials}"
        )));
    }
    if strata == 0 || t_max <= 0.0 {
        return Err(ShivaError::invalid("strata >= 1 and t_max > 0".to_string()));
    }

    // Quadrature: midpoint rule per stratum.
    let b = strata;
    let width = t_max / b as f64;
    let m = QUADRATURE_POINTS_PER_STRATUM;
    let mut stratum_means = vec![0.0; b];
    let mut stratum_vars = vec![0.0; b];
    for (j, sm) in stratum_means.iter_mut().enumerate() {
        let lo = j as f64 * width;
        let mut acc = 0.0;
        for i in 0..m {
            let t = lo + width * (i as f64 + 0.5) / m as f64;
            let v = r_fn(t);
            if !v.is_finite() {
                return Err(ShivaError::invalid(format!(
                    "ratio profile returned non-finite value at t = {t}"
                )));
            }
            acc += v;
        }
        *sm = acc / m as f64;
    }
    for (j, sv) in stratum_vars.iter_mut().enumerate() {
        let lo = j as f64 * width;
        let mut acc = 0.0;
        for i in 0..m {
            let t = lo + width * (i as f64 + 0.5) / m as f64;
            let d = r_fn(t) - stratum_means[j];
            acc += d * d;
        }
        *sv = acc / m as f64;
    }
    let mu = stratum_means.iter().sum::<f64>() / b as f64;
    let within = stratum_vars.iter().sum::<f64>() / b as f64;
    let between = stratum_means
        .iter()
        .map(|sm| (sm - mu) * (sm - mu))
        .sum::<f64>()
        / b as f64;
    let sigma_sq = within + between;

    // Monte Carlo: estimate the variance of both batch means over trials.
    let mut uni = Vec::with_capacity(trials);
    let mut strat = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut acc = 0.0;
        for _ in 0..b {
            acc += r_fn(rng.range(0.0, t_max));
        }
        uni.push(acc / b as f64);

        let plan = stratified_timesteps(b, t_max, rng)?;
        let acc: f64 = plan.draws.iter().map(|&t| r_fn(t)).sum();
        strat.push(acc / b as f64);
    }
    let var_uniform = crate::numeric::variance(&uni) * trials as f64 / (trials - 1) as f64;
    let var_stratified = crate::numeric::variance(&strat) * trials as f64 / (trials - 1) as f64;

    Ok(VarianceReport {
        strata,
        trials,
        mu,
        sigma_sq,
        within_stratum: within,
        between_stratum: between,
        var_uniform,
        var_stratified,
        delta_var: var_uniform - var_stratified,
        var_uniform_pred: sigma_sq / b as f64,
        var_stratified_pred: within / b as f64,
        delta_var_pred: between / b as f64,
    })
}

/// Trains a free scalar logit against the budget loss alone: each step the
/// batch mean is sigma(logit), the EMA updates, and the logit descends the
/// loss gradient. Returns (mu_global, sigma(logit)) after `steps`.
pub fn run_control_loop(
    r_target: f64,
    beta: f64,
    lambda: f64,
    lr: f64,
    steps: usize,
) -> Result<(f64, f64)> {
    let mut tracker = BudgetTracker::new(beta, r_target, lambda)?;
    let mut logit = 0.0;
    let mut r = crate::numeric::sigmoid(logit);
    for _ in 0..steps {
        r = crate::numeric::sigmoid(logit);
        let (_, dl_dr) = tracker.update_and_loss(r)?;
        logit -= lr * dl_dr * r * (1.0 - r);
    }
    Ok((tracker.mu_global, r))
}
