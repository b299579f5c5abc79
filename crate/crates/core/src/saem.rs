//! Stochastic approximation EM: step sizes, the sufficient-statistic
//! recursion and the particle-filter driver for complete-data models.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CompleteDataModel, ObsSeries};
use crate::rng::SimRng;
use crate::smc::{bootstrap_filter, sample_genealogy_path, FilterConfig};

/// `γ_k = 1` for `k ≤ K1`, `(k - K1)^(-β)` afterwards, for `k = 1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub warmup: usize,
    pub total: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

impl StepSchedule {
    pub fn new(warmup: usize, total: usize, beta: f64) -> Result<Self> {
        let s = Self { warmup, total, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.5 && self.beta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "step exponent must lie in (0.5, 1], got {}",
                self.beta
            )));
        }
        if self.warmup > self.total {
            return Err(Error::InvalidArgument(format!(
                "warmup {} exceeds total iterations {}",
                self.warmup, self.total
            )));
        }
        Ok(())
    }

    pub fn gamma(&self, k: usize) -> f64 {
        if k <= self.warmup {
            1.0
        } else {
            ((k - self.warmup) as f64).powf(-self.beta)
        }
    }
}

/// `s_prev + γ (s_new - s_prev)`, written so that `γ = 1` returns `s_new`
/// exactly.
pub fn sa_update(s_prev: &[f64], s_new: &[f64], gamma: f64) -> Vec<f64> {
    assert_eq!(s_prev.len(), s_new.len(), "sufficient statistic dimension");
    s_prev
        .iter()
        .zip(s_new)
        .map(|(&p, &n)| if gamma == 1.0 { n } else { p + gamma * (n - p) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

/// Per-iteration parameter trace; row 0 is the starting value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub param_names: Vec<String>,
    /// Name of the optional objective column (e.g. `logSL`).
    pub objective_name: Option<String>,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub objective: Option<f64>,
}

impl Trace {
    pub fn new(param_names: Vec<String>, objective_name: Option<&str>) -> Self {
        Self {
            param_names,
            objective_name: objective_name.map(str::to_string),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, iter: usize, theta: &[f64], objective: Option<f64>) {
        self.rows.push(TraceRow {
            iter,
            theta: theta.to_vec(),
            objective,
        });
    }

    pub fn last_theta(&self) -> Option<&[f64]> {
        self.rows.last().map(|r| r.theta.as_slice())
    }

    /// CSV with header `iter,param...[,objective]`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iter".to_string()];
        header.extend(self.param_names.iter().cloned());
        header.extend(self.objective_name.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.iter.to_string()];
            rec.extend(row.theta.iter().map(|v| v.to_string()));
            if self.objective_name.is_some() {
                rec.push(row.objective.map_or_else(|| "NA".into(), |v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub theta: Vec<f64>,
    pub trace: Trace,
    pub status: RunStatus,
    /// Iterations whose M-step was rejected (previous θ kept).
    pub rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaemSmcConfig {
    pub schedule: StepSchedule,
    pub particles: usize,
    pub threshold: usize,
}

/// SAEM with a bootstrap filter: each iteration filters at the current θ,
/// draws one latent path from the genealogy, updates the averaged
/// sufficient statistics and applies the closed-form M-step.
///
/// A degenerate filter ends the run with a failed status and the trace so far.
pub fn saem_smc_run<M: CompleteDataModel + ?Sized>(
    model: &M,
    obs: &ObsSeries,
    theta0: &[f64],
    config: &SaemSmcConfig,
    rng: &mut SimRng,
) -> Result<RunResult> {
    config.schedule.validate()?;
    model.spec().check_theta(theta0)?;
    let filter = FilterConfig {
        particles: config.particles,
        threshold: config.threshold,
    };
    let mut theta = theta0.to_vec();
    let mut trace = Trace::new(model.spec().param_names.clone(), None);
    trace.push(0, &theta, None);
    let mut s: Option<Vec<f64>> = None;
    let mut rejected = 0;
    for k in 1..=config.schedule.total {
        let ensemble = match bootstrap_filter(model, &theta, obs, filter, rng) {
            Ok((ens, _)) => ens,
            Err(e @ Error::FilterDegenerate { .. }) => {
                return Ok(RunResult {
                    theta,
                    trace,
                    status: RunStatus::Failed(format!("iteration {k}: {e}")),
                    rejected,
                })
            }
            Err(e) => return Err(e),
        };
        let path = sample_genealogy_path(&ensemble, rng);
        let fresh = match model.suffstats(obs, &path) {
            Ok(v) => v,
            Err(e) => {
                log::debug!("iteration {k}: sufficient statistics unavailable ({e}); keeping θ");
                rejected += 1;
                trace.push(k, &theta, None);
                continue;
            }
        };
        let gamma = config.schedule.gamma(k);
        let next = match &s {
            Some(prev) => sa_update(prev, &fresh, gamma),
            None => fresh,
        };
        match model.mstep(&next).filter(|t| model.spec().admits(t)) {
            Some(t) => theta = t,
            None => {
                log::debug!("iteration {k}: M-step rejected for statistics {next:?}");
                rejected += 1;
            }
        }
        s = Some(next);
        trace.push(k, &theta, None);
    }
    Ok(RunResult {
        theta,
        trace,
        status: RunStatus::Ok,
        rejected,
    })
}
