//! Nonlinear Gaussian state-space model
//!
//! `X_j = 2 sin(exp(X_{j-1})) + σ_x τ_j`, `Y_j = X_j + σ_y ν_j`, `X_0 = 0`,
//! with parameters `(σ_x, σ_y)` on the natural scale.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    order_summaries, CompleteDataModel, LatentPath, Model, ModelSpec, ObsSeries, StateSpaceModel,
    Transform,
};
use crate::error::{Error, Result};
use crate::rng::SimRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const VARIANCE_FLOOR: f64 = 1e-8;

const SUMMARY_NAMES: [&str; 6] = ["median", "mad", "p10", "p20", "p75", "p90"];

#[derive(Debug, Clone)]
pub struct NlgModel {
    spec: ModelSpec,
}

#[inline]
pub fn drift(prev: f64) -> f64 {
    2.0 * prev.exp().sin()
}

impl NlgModel {
    pub fn new(n: usize) -> Self {
        let label = |prefix: &str| SUMMARY_NAMES.iter().map(|s| format!("{prefix}_{s}")).collect();
        let spec = ModelSpec {
            name: "nlg".into(),
            param_names: vec!["sigma_x".into(), "sigma_y".into()],
            transforms: vec![Transform::Log, Transform::Log],
            n_obs: n,
            latent_grid: (0..=n).map(|j| j as f64).collect(),
            obs_times: (1..=n).map(|j| j as f64).collect(),
            fixed_constants: BTreeMap::from([("x0".to_string(), 0.0)]),
            obs_summary_labels: label("y"),
            latent_summary_labels: label("x"),
        };
        Self { spec }
    }

    /// Simulates `n` steps; the shocks are drawn as `(τ_j, ν_j)` pairs.
    pub fn simulate_n(theta: &[f64], n: usize, rng: &mut SimRng) -> (LatentPath, ObsSeries) {
        let (sx, sy) = (theta[0], theta[1]);
        let mut states = Vec::with_capacity(n + 1);
        let mut values = Vec::with_capacity(n);
        let mut x = 0.0;
        states.push(x);
        for _ in 0..n {
            let tau: f64 = rng.sample(StandardNormal);
            let nu: f64 = rng.sample(StandardNormal);
            x = drift(x) + sx * tau;
            states.push(x);
            values.push(x + sy * nu);
        }
        (
            LatentPath {
                times: (0..=n).map(|j| j as f64).collect(),
                states,
            },
            ObsSeries {
                times: (1..=n).map(|j| j as f64).collect(),
                values,
            },
        )
    }
}

impl Model for NlgModel {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn simulate(&self, theta: &[f64], rng: &mut SimRng) -> (LatentPath, ObsSeries) {
        Self::simulate_n(theta, self.spec.n_obs, rng)
    }

    fn obs_summaries(&self, obs: &ObsSeries) -> Result<Vec<f64>> {
        if obs.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(order_summaries(&obs.values, &mut Vec::new()).to_vec())
    }

    /// Same summary functions as the observations, applied to `X_{1:n}`.
    fn latent_summaries(&self, path: &LatentPath, _obs: &ObsSeries) -> Result<Vec<f64>> {
        if path.states.len() < 2 {
            return Err(Error::EmptySample);
        }
        Ok(order_summaries(&path.states[1..], &mut Vec::new()).to_vec())
    }

    fn simulate_joint_summaries(&self, theta: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        let (path, obs) = self.simulate(theta, rng);
        let mut scratch = Vec::with_capacity(obs.len());
        let mut s = Vec::with_capacity(12);
        s.extend(order_summaries(&obs.values, &mut scratch));
        s.extend(order_summaries(&path.states[1..], &mut scratch));
        Ok(s)
    }
}

impl StateSpaceModel for NlgModel {
    fn initial_state(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn steps_per_obs(&self) -> usize {
        1
    }

    fn propagate(&self, theta: &[f64], _obs_index: usize, prev: f64, rng: &mut SimRng, out: &mut [f64]) {
        let tau: f64 = rng.sample(StandardNormal);
        out[0] = drift(prev) + theta[0] * tau;
    }

    fn obs_log_density(&self, theta: &[f64], y: f64, x: f64) -> f64 {
        let var = theta[1] * theta[1];
        -0.5 * (LN_2PI + var.ln() + (y - x) * (y - x) / var)
    }
}

impl CompleteDataModel for NlgModel {
    /// `(Σ (X_j - 2 sin(e^{X_{j-1}}))², Σ (Y_j - X_j)²)`.
    fn suffstats(&self, obs: &ObsSeries, path: &LatentPath) -> Result<Vec<f64>> {
        let n = obs.len();
        if path.states.len() != n + 1 {
            return Err(Error::DimensionMismatch {
                expected: n + 1,
                got: path.states.len(),
            });
        }
        let x = &path.states;
        let sx = (1..=n).map(|j| (x[j] - drift(x[j - 1])).powi(2)).sum();
        let sy = (1..=n).map(|j| (obs.values[j - 1] - x[j]).powi(2)).sum();
        Ok(vec![sx, sy])
    }

    fn mstep(&self, s: &[f64]) -> Option<Vec<f64>> {
        let (vx, vy) = nlg_mstep(s, self.spec.n_obs)?;
        Some(vec![vx.max(VARIANCE_FLOOR).sqrt(), vy.max(VARIANCE_FLOOR).sqrt()])
    }
}

/// Closed-form variance update `(S_x / n, S_y / n)`, unfloored.
pub fn nlg_mstep(s: &[f64], n: usize) -> Option<(f64, f64)> {
    let vx = s[0] / n as f64;
    let vy = s[1] / n as f64;
    (vx.is_finite() && vy.is_finite() && vx >= 0.0 && vy >= 0.0).then_some((vx, vy))
}
