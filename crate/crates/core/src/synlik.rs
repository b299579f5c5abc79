//! Synthetic likelihoods and SAEM-SL.
//!
//! A synthetic likelihood replaces the intractable density of a summary
//! vector by a Gaussian whose mean and covariance are estimated from `R`
//! model simulations at the candidate θ. SAEM-SL applies this to the joint
//! summaries `s = (S(Y), S(X))`: each external iteration draws latent
//! summaries from the conditional Gaussian given the observed ones, maximizes
//! the joint synthetic likelihood over θ by a short Nelder–Mead run, and
//! averages the optimum's simulated moments by stochastic approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{mvn_logpdf, mvn_sample, robust_cholesky, Matrix, MomentPair, MomentSnapshot, Vector};
use crate::models::Model;
use crate::optim::nelder_mead_with;
use crate::rng::{fork_seed, stream, SimRng};
use crate::saem::{RunResult, RunStatus, StepSchedule, Trace};
use crate::stats::{robust_moments, sample_moments};

/// Initial covariance scale of the moment recursion.
pub const INITIAL_COV_SCALE: f64 = 1e-12;

/// Partition of a joint summary vector into its `S(Y)` and `S(X)` blocks
/// (observed block first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSummaryLayout {
    pub dim_y: usize,
    pub dim_x: usize,
}

impl JointSummaryLayout {
    pub fn for_model<M: Model + ?Sized>(model: &M) -> Self {
        Self {
            dim_y: model.spec().obs_dim(),
            dim_x: model.spec().latent_dim(),
        }
    }

    pub fn d(&self) -> usize {
        self.dim_y + self.dim_x
    }

    pub fn y_range(&self) -> std::ops::Range<usize> {
        0..self.dim_y
    }

    pub fn x_range(&self) -> std::ops::Range<usize> {
        self.dim_y..self.d()
    }
}

/// Which summaries a synthetic likelihood is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryScope {
    /// `(S(Y), S(X))`.
    Joint,
    /// `S(Y)` only: the ordinary data synthetic likelihood.
    ObsOnly,
}

/// Simulation budget and moment estimator of one synthetic-likelihood
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlConfig {
    pub simulations: usize,
    pub robust: bool,
    pub exec: Exec,
}

/// `R` summary vectors at `theta`; simulation `r` draws from stream `r` of
/// `seed`, so the output does not depend on the execution policy.
pub fn simulate_summaries<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    scope: SummaryScope,
    simulations: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    exec.map(simulations, |r| {
        let mut rng = stream(seed, r as u64);
        match scope {
            SummaryScope::Joint => model.simulate_joint_summaries(theta, &mut rng),
            SummaryScope::ObsOnly => model.simulate_obs_summaries(theta, &mut rng),
        }
    })
    .into_iter()
    .collect()
}

/// `R` joint summary vectors `(S(y*_r), S(x*_r))` at `theta`.
pub fn simulate_joint_summaries<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    simulations: usize,
    exec: Exec,
    rng: &mut SimRng,
) -> Result<Vec<Vec<f64>>> {
    if simulations < 2 {
        return Err(Error::TooFewRows { needed: 2, got: simulations });
    }
    simulate_summaries(model, theta, SummaryScope::Joint, simulations, fork_seed(rng), exec)
}

pub fn estimate_moments(rows: &[Vec<f64>], robust: bool) -> Result<MomentPair> {
    if robust {
        robust_moments(rows)
    } else {
        sample_moments(rows)
    }
}

/// Simulates `R` summaries at `theta`, estimates their moments and returns
/// `log N(s; μ̂, Σ̂)` together with the moments used.
pub fn sl_logdensity<M: Model + ?Sized>(
    s: &Vector,
    model: &M,
    theta: &[f64],
    scope: SummaryScope,
    config: &SlConfig,
    rng: &mut SimRng,
) -> Result<(f64, MomentPair)> {
    let rows = simulate_summaries(model, theta, scope, config.simulations, fork_seed(rng), config.exec)?;
    let moments = estimate_moments(&rows, config.robust)?;
    let value = mvn_logpdf(s, &moments)?;
    Ok((value, moments))
}

/// Moments of `S(X)` given `S(Y) = s_y` under the joint Gaussian `mp`.
pub fn conditional_moments(mp: &MomentPair, layout: &JointSummaryLayout, s_y: &[f64]) -> Result<MomentPair> {
    if mp.dim() != layout.d() {
        return Err(Error::DimensionMismatch { expected: layout.d(), got: mp.dim() });
    }
    if s_y.len() != layout.dim_y {
        return Err(Error::DimensionMismatch { expected: layout.dim_y, got: s_y.len() });
    }
    let (dy, dx) = (layout.dim_y, layout.dim_x);
    let sigma_y = mp.cov.view((0, 0), (dy, dy)).into_owned();
    let sigma_yx = mp.cov.view((0, dy), (dy, dx)).into_owned();
    let sigma_x = mp.cov.view((dy, dy), (dx, dx)).into_owned();
    let l = robust_cholesky(&sigma_y)?.ok_or(Error::SingularCovariance)?;
    let chol = nalgebra::Cholesky::pack_dirty(l);
    // K = Σ_y⁻¹ Σ_yx, so Σ_xy Σ_y⁻¹ = Kᵀ
    let k = chol.solve(&sigma_yx);
    let resid = Vector::from_column_slice(s_y) - mp.mean.rows(0, dy);
    let mean = mp.mean.rows(dy, dx) + k.transpose() * resid;
    let mut cov: Matrix = sigma_x - sigma_yx.transpose() * &k;
    cov = (&cov + cov.transpose()) * 0.5;
    MomentPair::new(mean, cov)
}

/// One draw of `S(X)` from the conditional Gaussian (Cholesky when it is
/// positive definite, nearest-PSD repair otherwise).
pub fn sample_latent_summaries(mp_cond: &MomentPair, rng: &mut SimRng) -> Result<Vector> {
    mvn_sample(mp_cond, rng)
}

/// Best parameter found by an internal maximization.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalOutcome {
    pub theta: Vec<f64>,
    /// Simulated moments at `theta`; `None` if every evaluation failed.
    pub moments: Option<MomentPair>,
    pub log_sl: f64,
    pub evals: usize,
}

/// Nelder–Mead over the working-scale θ of `-log N(s; μ̂(θ), Σ̂(θ))`,
/// `iters` iterations from `theta_start`, with fresh simulations at every
/// evaluation. Returns the best θ seen and the moments simulated there.
pub fn maximize_sl<M: Model + ?Sized>(
    s: &Vector,
    theta_start: &[f64],
    model: &M,
    scope: SummaryScope,
    config: &SlConfig,
    iters: usize,
    rng: &mut SimRng,
    mut on_iter: impl FnMut(usize, &[f64], f64),
) -> Result<InternalOutcome> {
    let spec = model.spec();
    spec.check_theta(theta_start)?;
    let w0 = spec.to_working(theta_start);
    let mut best: Option<(f64, Vec<f64>, MomentPair)> = None;
    let mut objective = |w: &[f64]| -> f64 {
        let theta = spec.to_natural(w);
        if !spec.admits(&theta) {
            return f64::INFINITY;
        }
        match sl_logdensity(s, model, &theta, scope, config, rng) {
            Ok((value, moments)) if value.is_finite() => {
                if best.as_ref().is_none_or(|b| value > b.0) {
                    best = Some((value, theta, moments));
                }
                -value
            }
            Ok(_) => f64::INFINITY,
            Err(e) => {
                log::trace!("synthetic likelihood failed at {theta:?}: {e}");
                f64::INFINITY
            }
        }
    };
    let result = nelder_mead_with(&mut objective, &w0, iters, |state| {
        on_iter(state.iteration, &spec.to_natural(&state.best.0), -state.best.1)
    })?;
    Ok(match best {
        Some((log_sl, theta, moments)) => InternalOutcome {
            theta,
            moments: Some(moments),
            log_sl,
            evals: result.evals,
        },
        None => InternalOutcome {
            theta: theta_start.to_vec(),
            moments: None,
            log_sl: f64::NEG_INFINITY,
            evals: result.evals,
        },
    })
}

/// Internal step of SAEM-SL: maximize the joint synthetic likelihood of the
/// fixed vector `s_k` with `L` Nelder–Mead iterations.
pub fn internal_sl_maximize<M: Model + ?Sized>(
    s_k: &Vector,
    theta_start: &[f64],
    model: &M,
    config: &SlConfig,
    iters: usize,
    rng: &mut SimRng,
) -> Result<InternalOutcome> {
    maximize_sl(s_k, theta_start, model, SummaryScope::Joint, config, iters, rng, |_, _, _| {})
}

/// Averaged moments `(μ̂^(k), Σ̂^(k))` and current parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SLState {
    pub mu: Vector,
    pub sigma: Matrix,
    pub theta: Vec<f64>,
    pub k: usize,
}

impl SLState {
    /// Zero mean and covariance `1e-12 · I`.
    pub fn initial(d: usize, theta: &[f64]) -> Self {
        Self {
            mu: Vector::zeros(d),
            sigma: Matrix::identity(d, d) * INITIAL_COV_SCALE,
            theta: theta.to_vec(),
            k: 0,
        }
    }

    pub fn moments(&self) -> MomentPair {
        MomentPair {
            mean: self.mu.clone(),
            cov: self.sigma.clone(),
        }
    }

    /// `μ ← μ + γ(μ* - μ)`, `Σ ← Σ + γ(Σ* - Σ)`; `γ = 1` copies exactly.
    pub fn update(&mut self, target: &MomentPair, gamma: f64) {
        if gamma == 1.0 {
            self.mu.copy_from(&target.mean);
            self.sigma.copy_from(&target.cov);
        } else {
            self.mu += (&target.mean - &self.mu) * gamma;
            self.sigma += (&target.cov - &self.sigma) * gamma;
        }
    }

    pub fn snapshot(&self) -> MomentSnapshot {
        self.moments().snapshot()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaemSlConfig {
    pub schedule: StepSchedule,
    /// `R`, simulations per synthetic-likelihood evaluation.
    pub simulations: usize,
    /// `L`, Nelder–Mead iterations per internal maximization.
    pub internal_iters: usize,
    pub robust: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaemSlRun {
    pub result: RunResult,
    pub state: SLState,
}

/// SAEM-SL from `theta0` given observed summaries `s_obs`.
///
/// External iteration `k`: conditional moments of `S(X)` from the current
/// averaged moments, one draw `S(X^(k))`, internal maximization from the
/// current θ, then the stochastic-approximation update of the moments with
/// the optimum's simulated moments.
pub fn saem_sl_run<M: Model + ?Sized>(
    model: &M,
    s_obs: &[f64],
    theta0: &[f64],
    config: &SaemSlConfig,
    exec: Exec,
    rng: &mut SimRng,
) -> Result<SaemSlRun> {
    config.schedule.validate()?;
    model.spec().check_theta(theta0)?;
    let layout = JointSummaryLayout::for_model(model);
    if s_obs.len() != layout.dim_y {
        return Err(Error::DimensionMismatch { expected: layout.dim_y, got: s_obs.len() });
    }
    let sl = SlConfig {
        simulations: config.simulations,
        robust: config.robust,
        exec,
    };
    let mut state = SLState::initial(layout.d(), theta0);
    let mut trace = Trace::new(model.spec().param_names.clone(), Some("logSL"));
    trace.push(0, theta0, None);
    let mut rejected = 0;
    let mut status = RunStatus::Ok;
    for k in 1..=config.schedule.total {
        let step = conditional_moments(&state.moments(), &layout, s_obs)
            .and_then(|cond| sample_latent_summaries(&cond, rng));
        let s_x = match step {
            Ok(v) => v,
            Err(e) => {
                status = RunStatus::Failed(format!("iteration {k}: latent summaries unavailable: {e}"));
                break;
            }
        };
        let s_k = Vector::from_iterator(layout.d(), s_obs.iter().copied().chain(s_x.iter().copied()));
        let outcome = internal_sl_maximize(&s_k, &state.theta, model, &sl, config.internal_iters, rng)?;
        match &outcome.moments {
            Some(m) => {
                state.update(m, config.schedule.gamma(k));
                state.theta = outcome.theta.clone();
            }
            None => {
                log::debug!("iteration {k}: every synthetic-likelihood evaluation failed; keeping θ");
                rejected += 1;
            }
        }
        state.k = k;
        let objective = outcome.moments.is_some().then_some(outcome.log_sl);
        trace.push(k, &state.theta, objective);
    }
    Ok(SaemSlRun {
        result: RunResult {
            theta: state.theta.clone(),
            trace,
            status,
            rejected,
        },
        state,
    })
}

/// Direct maximization of the data synthetic likelihood `log N(S(Y); μ(θ), Σ(θ))`
/// by `iters` Nelder–Mead iterations. The trace records the best-so-far θ
/// after every iteration.
pub fn data_sl_maximize<M: Model + ?Sized>(
    model: &M,
    s_y: &[f64],
    theta_start: &[f64],
    config: &SlConfig,
    iters: usize,
    rng: &mut SimRng,
) -> Result<RunResult> {
    let dim_y = model.spec().obs_dim();
    if s_y.len() != dim_y {
        return Err(Error::DimensionMismatch { expected: dim_y, got: s_y.len() });
    }
    let s = Vector::from_column_slice(s_y);
    let mut trace = Trace::new(model.spec().param_names.clone(), Some("logSL"));
    trace.push(0, theta_start, None);
    let outcome = maximize_sl(&s, theta_start, model, SummaryScope::ObsOnly, config, iters, rng, |it, theta, v| {
        trace.push(it, theta, v.is_finite().then_some(v))
    })?;
    if let Some(first) = trace.rows.first_mut() {
        first.objective = (iters == 0 && outcome.log_sl.is_finite()).then_some(outcome.log_sl);
    }
    let status = if outcome.moments.is_some() {
        RunStatus::Ok
    } else {
        RunStatus::Failed("every synthetic-likelihood evaluation failed".into())
    };
    Ok(RunResult {
        theta: outcome.theta,
        trace,
        status,
        rejected: 0,
    })
}
