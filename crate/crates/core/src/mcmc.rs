//! Likelihood-free MCMC baselines: pseudo-marginal Bayesian synthetic
//! likelihood and ABC-MCMC with a weighted Gaussian kernel, both driven by an
//! adaptive Gaussian random walk on the working parameter scale.

use std::io::Write;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{cholesky, Matrix, Vector};
use crate::models::{Model, ModelSpec};
use crate::rng::{fork_seed, SimRng};
use crate::stats::{mad, percentile_sorted, robust_moments, sample_moments};
use crate::synlik::{simulate_summaries, SummaryScope};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Marginal prior of one parameter (natural scale).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    /// Uniform on the closed interval `[lower, upper]`.
    Uniform { lower: f64, upper: f64 },
    /// Shape–rate parametrization, mean `shape / rate`.
    Gamma { shape: f64, rate: f64 },
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::Uniform { lower, upper } => lower < upper && lower.is_finite() && upper.is_finite(),
            Prior::Gamma { shape, rate } => shape > 0.0 && rate > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid prior {self:?}")))
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Prior::Uniform { lower, upper } => (lower..=upper).contains(&x),
            Prior::Gamma { .. } => x > 0.0 && x.is_finite(),
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if !self.contains(x) {
            return f64::NEG_INFINITY;
        }
        match *self {
            Prior::Uniform { lower, upper } => -(upper - lower).ln(),
            Prior::Gamma { shape, rate } => {
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
        }
    }

    /// Length of the support, infinite for the gamma prior.
    pub fn width(&self) -> f64 {
        match *self {
            Prior::Uniform { lower, upper } => upper - lower,
            Prior::Gamma { .. } => f64::INFINITY,
        }
    }
}

/// Independent priors, one per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorSpec(pub Vec<Prior>);

impl PriorSpec {
    pub fn validate(&self, n_params: usize) -> Result<()> {
        if self.0.len() != n_params {
            return Err(Error::DimensionMismatch { expected: n_params, got: self.0.len() });
        }
        self.0.iter().try_for_each(Prior::validate)
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.0.iter().zip(theta).all(|(p, x)| p.contains(*x))
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.0.iter().zip(theta).map(|(p, x)| p.log_density(*x)).sum()
    }
}

/// Random-walk settings on the working scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Standard deviations of the fixed diagonal proposal used before
    /// adaptation starts.
    pub initial_sd: Vec<f64>,
    /// Number of draws made with the fixed proposal.
    #[serde(default = "default_adapt_after")]
    pub adapt_after: usize,
    /// When false the fixed proposal is used throughout.
    #[serde(default = "default_true")]
    pub adapt: bool,
}

fn default_adapt_after() -> usize {
    500
}

fn default_true() -> bool {
    true
}

/// Ridge added to the adapted covariance.
pub const ADAPT_EPSILON: f64 = 1e-10;

/// Haario-style adaptive Gaussian random walk: a fixed diagonal covariance
/// during warmup, then `(2.38²/p) Ĉ + ε I` with `Ĉ` the running covariance of
/// every state visited so far.
#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    config: ProposalConfig,
    n: usize,
    mean: Vec<f64>,
    /// Running sum of squared deviations (Welford).
    m2: Matrix,
}

impl AdaptiveProposal {
    pub fn new(config: ProposalConfig) -> Result<Self> {
        if config.initial_sd.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("proposal standard deviations must be positive".into()));
        }
        let p = config.initial_sd.len();
        Ok(Self {
            config,
            n: 0,
            mean: vec![0.0; p],
            m2: Matrix::zeros(p, p),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn observed(&self) -> usize {
        self.n
    }

    /// Adds a chain state to the running moments.
    pub fn observe(&mut self, w: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        let delta: Vec<f64> = w.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let p = self.dim();
        for i in 0..p {
            let after_i = w[i] - self.mean[i];
            for j in 0..p {
                self.m2[(i, j)] += delta[j] * after_i;
            }
        }
    }

    pub fn adapting(&self) -> bool {
        self.config.adapt && self.n > self.config.adapt_after.max(1)
    }

    pub fn empirical_covariance(&self) -> Option<Matrix> {
        (self.n >= 2).then(|| {
            let c = &self.m2 / (self.n - 1) as f64;
            (&c + c.transpose()) * 0.5
        })
    }

    pub fn covariance(&self) -> Matrix {
        let p = self.dim();
        match self.empirical_covariance().filter(|_| self.adapting()) {
            Some(c) => c * (2.38 * 2.38 / p as f64) + Matrix::identity(p, p) * ADAPT_EPSILON,
            None => Matrix::from_diagonal(&Vector::from_iterator(
                p,
                self.config.initial_sd.iter().map(|s| s * s),
            )),
        }
    }

    /// `current + L z`, `L Lᵀ` the current proposal covariance.
    pub fn propose(&self, current: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let cov = self.covariance();
        let l = cholesky(&cov).ok().flatten().unwrap_or_else(|| {
            let p = self.dim();
            Matrix::from_diagonal(&Vector::from_iterator(p, self.config.initial_sd.iter().copied()))
        });
        let z = Vector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = l * z;
        current.iter().zip(step.iter()).map(|(c, s)| c + s).collect()
    }
}

/// MCMC output on the natural scale; entry `i` is the state after iteration `i`
/// (entry 0 is the start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub param_names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    /// Log target (prior + Jacobian + log-likelihood estimate) of the stored state.
    pub log_targets: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl Chain {
    fn new(param_names: Vec<String>, theta0: &[f64], log_target: f64) -> Self {
        Self {
            param_names,
            draws: vec![theta0.to_vec()],
            log_targets: vec![log_target],
            accepted: vec![true],
        }
    }

    fn push(&mut self, theta: &[f64], log_target: f64, accepted: bool) {
        self.draws.push(theta.to_vec());
        self.log_targets.push(log_target);
        self.accepted.push(accepted);
    }

    pub fn iterations(&self) -> usize {
        self.draws.len() - 1
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted[1..].iter().filter(|a| **a).count()
    }

    pub fn acceptance_rate(&self) -> f64 {
        match self.iterations() {
            0 => 0.0,
            n => self.accepted_count() as f64 / n as f64,
        }
    }

    /// Acceptance rate over iterations `range` (1-based iteration numbers).
    pub fn acceptance_rate_in(&self, range: std::ops::Range<usize>) -> f64 {
        let n = range.len();
        if n == 0 {
            return 0.0;
        }
        self.accepted[range].iter().filter(|a| **a).count() as f64 / n as f64
    }

    /// CSV with header `iter,param...,logtarget,accepted`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iter".to_string()];
        header.extend(self.param_names.iter().cloned());
        header.push("logtarget".into());
        header.push("accepted".into());
        w.write_record(&header)?;
        for (i, theta) in self.draws.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(theta.iter().map(|v| v.to_string()));
            rec.push(self.log_targets[i].to_string());
            rec.push(u8::from(self.accepted[i]).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Metropolis–Hastings on the working scale with an adaptive random walk,
/// where `log_lik` may be a noisy estimate.
///
/// The estimate attached to the current state is kept until a proposal is
/// accepted; it is never recomputed. Proposals outside the prior support are
/// rejected without calling `log_lik`; `None` from `log_lik` rejects too.
/// A zero estimate (`-∞`) is allowed at the start only in the sense that the
/// chain then moves to the first proposal with a positive estimate.
pub fn pseudo_marginal_mh<F>(
    spec: &ModelSpec,
    prior: &PriorSpec,
    theta0: &[f64],
    iters: usize,
    proposal: &ProposalConfig,
    rng: &mut SimRng,
    mut log_lik: F,
) -> Result<Chain>
where
    F: FnMut(&[f64], &mut SimRng) -> Option<f64>,
{
    prior.validate(spec.n_params())?;
    spec.check_theta(theta0)?;
    if !prior.contains(theta0) {
        return Err(Error::InvalidArgument(format!("start {theta0:?} outside the prior support")));
    }
    if proposal.initial_sd.len() != spec.n_params() {
        return Err(Error::DimensionMismatch { expected: spec.n_params(), got: proposal.initial_sd.len() });
    }
    let mut walk = AdaptiveProposal::new(proposal.clone())?;
    let log_prior = |theta: &[f64], w: &[f64]| prior.log_density(theta) + spec.log_jacobian(w);

    let mut w = spec.to_working(theta0);
    let mut theta = theta0.to_vec();
    let ll0 = log_lik(&theta, rng).filter(|v| !v.is_nan() && *v < f64::INFINITY).ok_or_else(|| {
        Error::InvalidArgument(format!("log-likelihood estimate unavailable at the start {theta0:?}"))
    })?;
    if ll0 == f64::NEG_INFINITY {
        // a zero estimate at the start: the first proposal with a positive estimate is accepted
        warn!("likelihood estimate is zero at the start {theta0:?}");
    }
    let mut current = log_prior(&theta, &w) + ll0;
    let mut chain = Chain::new(spec.param_names.clone(), &theta, current);
    walk.observe(&w);

    for _ in 0..iters {
        let w_new = walk.propose(&w, rng);
        let theta_new = spec.to_natural(&w_new);
        let mut accepted = false;
        if spec.admits(&theta_new) && prior.contains(&theta_new) {
            if let Some(ll) = log_lik(&theta_new, rng).filter(|v| !v.is_nan()) {
                let proposed = log_prior(&theta_new, &w_new) + ll;
                let u: f64 = rng.random();
                if proposed > f64::NEG_INFINITY && u.ln() < proposed - current {
                    w = w_new;
                    theta = theta_new;
                    current = proposed;
                    accepted = true;
                }
            }
        }
        chain.push(&theta, current, accepted);
        walk.observe(&w);
    }
    Ok(chain)
}

/// `log c(k, v)` of the Ghurye–Olkin normalizing constant.
fn log_go_constant(k: usize, v: f64) -> f64 {
    let kf = k as f64;
    let mut out = -(kf * v / 2.0) * std::f64::consts::LN_2 - kf * (kf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for i in 1..=k {
        out -= ln_gamma((v - i as f64 + 1.0) / 2.0);
    }
    out
}

/// Unbiased estimate of `log N(s; μ, Σ)` from `R` simulated summaries
/// (Ghurye–Olkin). Returns `-∞` when the estimate is zero. Needs `R > d + 3`.
pub fn unbiased_sl_logdensity(s: &[f64], rows: &[Vec<f64>]) -> Result<f64> {
    let r = rows.len();
    let d = s.len();
    if r <= d + 3 {
        return Err(Error::TooFewRows { needed: d + 4, got: r });
    }
    let mp = sample_moments(rows)?;
    let rf = r as f64;
    // M = (R - 1) Σ̂; |M - u uᵀ/(1 - 1/R)| = |M| (1 - q) with q = uᵀ M⁻¹ u / (1 - 1/R)
    let m = &mp.cov * (rf - 1.0);
    let l = cholesky(&m)?.ok_or(Error::SingularCovariance)?;
    let u = Vector::from_column_slice(s) - &mp.mean;
    let z = l.solve_lower_triangular(&u).ok_or(Error::SingularCovariance)?;
    let q = z.norm_squared() / (1.0 - 1.0 / rf);
    if q >= 1.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let log_det_m: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let df = d as f64;
    Ok(-0.5 * df * LN_2PI + log_go_constant(d, rf - 2.0) - log_go_constant(d, rf - 1.0)
        - 0.5 * df * (1.0 - 1.0 / rf).ln()
        - 0.5 * log_det_m
        + 0.5 * (rf - df - 3.0) * (1.0 - q).ln())
}

/// Gaussian plug-in `log N(s; μ̂, Σ̂)` with robust moments.
fn robust_plugin_logdensity(s: &[f64], rows: &[Vec<f64>]) -> Result<f64> {
    let mp = robust_moments(rows)?;
    crate::linalg::mvn_logpdf(&Vector::from_column_slice(s), &mp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmBslConfig {
    pub simulations: usize,
    pub iters: usize,
    /// Robust Gaussian plug-in instead of the unbiased estimator.
    #[serde(default)]
    pub robust: bool,
    pub proposal: ProposalConfig,
}

/// Pseudo-marginal MCMC on `π(θ | S(Y)) ∝ p̂(S(Y); θ) π(θ)` with a fresh
/// synthetic-likelihood estimate at every proposal.
pub fn pm_bsl_run<M: Model + ?Sized>(
    model: &M,
    s_y: &[f64],
    prior: &PriorSpec,
    theta0: &[f64],
    config: &PmBslConfig,
    exec: Exec,
    rng: &mut SimRng,
) -> Result<Chain> {
    let estimate = |theta: &[f64], rng: &mut SimRng| -> Option<f64> {
        let seed = fork_seed(rng);
        let rows = simulate_summaries(model, theta, SummaryScope::ObsOnly, config.simulations, seed, exec).ok()?;
        let value = if config.robust {
            robust_plugin_logdensity(s_y, &rows)
        } else {
            unbiased_sl_logdensity(s_y, &rows)
        };
        value.ok()
    };
    pseudo_marginal_mh(model.spec(), prior, theta0, config.iters, &config.proposal, rng, estimate)
}

/// One tolerance level of an ABC-MCMC run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStage {
    pub delta: f64,
    pub iters: usize,
}

/// Gaussian ABC kernel with diagonal weights: `Ω = diag(ω²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcKernelSpec {
    pub schedule: Vec<DeltaStage>,
    /// `ω_i`; `None` means unit weights.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl AbcKernelSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::InvalidArgument("ABC tolerance schedule is empty".into()));
        }
        if self.schedule.iter().any(|s| !(s.delta > 0.0)) {
            return Err(Error::InvalidArgument("ABC tolerances must be positive".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: w.len() });
            }
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidArgument("ABC weights must be positive".into()));
            }
        }
        Ok(())
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// `log J_δ = -(S(z) - S(y))ᵀ Ω⁻¹ (S(z) - S(y)) / (2δ²)`.
    pub fn log_kernel(&self, s_z: &[f64], s_y: &[f64], delta: f64) -> f64 {
        let q: f64 = s_z
            .iter()
            .zip(s_y)
            .enumerate()
            .map(|(i, (z, y))| ((z - y) / self.weight(i)).powi(2))
            .sum();
        -q / (2.0 * delta * delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub delta: f64,
    pub iters: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    /// First iteration of the stage (1-based, as in the chain).
    pub first_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbcRun {
    pub chain: Chain,
    pub stages: Vec<StageReport>,
    /// Every synthetic summary vector simulated during the last
    /// (smallest-δ) stage, accepted or not.
    pub summary_store: Vec<Vec<f64>>,
    /// Final state and its synthetic summaries.
    pub final_theta: Vec<f64>,
    pub final_summaries: Vec<f64>,
}

impl AbcRun {
    /// Draws from the last stage.
    pub fn last_stage_draws(&self) -> &[Vec<f64>] {
        let first = self.stages.last().map_or(1, |s| s.first_iter);
        &self.chain.draws[first..]
    }
}

/// ABC-MCMC: one synthetic dataset per iteration, accepted with the ratio of
/// kernel × prior × Jacobian at proposed vs current state. The tolerance
/// follows `kernel.schedule`; the current state's kernel is re-evaluated (not
/// re-simulated) when the tolerance changes.
pub fn abc_mcmc_run<M: Model + ?Sized>(
    model: &M,
    s_y: &[f64],
    prior: &PriorSpec,
    kernel: &AbcKernelSpec,
    theta0: &[f64],
    proposal: &ProposalConfig,
    rng: &mut SimRng,
) -> Result<AbcRun> {
    let spec = model.spec();
    kernel.validate(s_y.len())?;
    prior.validate(spec.n_params())?;
    spec.check_theta(theta0)?;
    if !prior.contains(theta0) {
        return Err(Error::InvalidArgument(format!("start {theta0:?} outside the prior support")));
    }
    let mut walk = AdaptiveProposal::new(proposal.clone())?;
    let mut theta = theta0.to_vec();
    let mut w = spec.to_working(theta0);
    let mut s_z = model.simulate_obs_summaries(&theta, rng)?;
    let log_prior = |theta: &[f64], w: &[f64]| prior.log_density(theta) + spec.log_jacobian(w);
    let mut lp = log_prior(&theta, &w);
    let first_delta = kernel.schedule[0].delta;
    let mut chain = Chain::new(spec.param_names.clone(), &theta, lp + kernel.log_kernel(&s_z, s_y, first_delta));
    walk.observe(&w);

    let mut stages = Vec::with_capacity(kernel.schedule.len());
    let mut summary_store = Vec::new();
    let last_stage = kernel.schedule.len() - 1;
    for (si, stage) in kernel.schedule.iter().enumerate() {
        let first_iter = chain.iterations() + 1;
        let mut current_kernel = kernel.log_kernel(&s_z, s_y, stage.delta);
        let mut accepted = 0;
        for _ in 0..stage.iters {
            let w_new = walk.propose(&w, rng);
            let theta_new = spec.to_natural(&w_new);
            let mut ok = false;
            if spec.admits(&theta_new) && prior.contains(&theta_new) {
                if let Ok(s_new) = model.simulate_obs_summaries(&theta_new, rng) {
                    if si == last_stage {
                        summary_store.push(s_new.clone());
                    }
                    let lp_new = log_prior(&theta_new, &w_new);
                    let k_new = kernel.log_kernel(&s_new, s_y, stage.delta);
                    let u: f64 = rng.random();
                    if u.ln() < (lp_new + k_new) - (lp + current_kernel) {
                        theta = theta_new;
                        w = w_new;
                        s_z = s_new;
                        lp = lp_new;
                        current_kernel = k_new;
                        ok = true;
                        accepted += 1;
                    }
                }
            }
            chain.push(&theta, lp + current_kernel, ok);
            walk.observe(&w);
        }
        stages.push(StageReport {
            delta: stage.delta,
            iters: stage.iters,
            accepted,
            acceptance_rate: if stage.iters > 0 { accepted as f64 / stage.iters as f64 } else { 0.0 },
            first_iter,
        });
    }
    Ok(AbcRun {
        chain,
        stages,
        summary_store,
        final_theta: theta,
        final_summaries: s_z,
    })
}

/// Per-coordinate MAD of a summary store, used as ABC kernel weights `ω`.
///
/// A zero MAD is replaced by the smallest positive MAD across coordinates;
/// if every MAD is zero all weights are 1.
pub fn calibrate_weights(store: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = store.first().ok_or(Error::EmptySample)?.len();
    let mut column = Vec::with_capacity(store.len());
    let mut weights = Vec::with_capacity(d);
    for i in 0..d {
        column.clear();
        for row in store {
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: row.len() });
            }
            column.push(row[i]);
        }
        weights.push(mad(&column)?);
    }
    let smallest = weights.iter().copied().filter(|w| *w > 0.0).fold(f64::INFINITY, f64::min);
    if weights.iter().any(|w| *w <= 0.0) {
        if smallest.is_finite() {
            warn!("zero MAD in calibration store; substituting the smallest positive MAD {smallest}");
        } else {
            warn!("every coordinate of the calibration store is constant; using unit weights");
        }
        let fill = if smallest.is_finite() { smallest } else { 1.0 };
        weights.iter_mut().filter(|w| **w <= 0.0).for_each(|w| *w = fill);
    }
    Ok(weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub param_names: Vec<String>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub draws: usize,
}

/// Posterior means and central 95% intervals (type-7 2.5% and 97.5%
/// quantiles) of `draws` after discarding the first `burn_in`.
pub fn posterior_summary(param_names: &[String], draws: &[Vec<f64>], burn_in: usize) -> Result<PosteriorSummary> {
    if burn_in >= draws.len() {
        return Err(Error::EmptySample);
    }
    let kept = &draws[burn_in..];
    let p = kept[0].len();
    let mut mean = Vec::with_capacity(p);
    let mut lower = Vec::with_capacity(p);
    let mut upper = Vec::with_capacity(p);
    for i in 0..p {
        let mut col: Vec<f64> = kept.iter().map(|d| d[i]).collect();
        mean.push(col.iter().sum::<f64>() / col.len() as f64);
        col.sort_unstable_by(f64::total_cmp);
        lower.push(percentile_sorted(&col, 2.5));
        upper.push(percentile_sorted(&col, 97.5));
    }
    Ok(PosteriorSummary {
        param_names: param_names.to_vec(),
        mean,
        lower,
        upper,
        draws: kept.len(),
    })
}

impl Chain {
    pub fn summary(&self, burn_in: usize) -> Result<PosteriorSummary> {
        posterior_summary(&self.param_names, &self.draws, burn_in)
    }
}
