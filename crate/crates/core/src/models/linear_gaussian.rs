//! Gaussian random walk observed with noise
//!
//! `X_j = X_{j-1} + σ_x τ_j`, `Y_j = X_j + σ_y ν_j`, `X_0 = 0`. The exact
//! likelihood is available from the Kalman filter, which makes this the
//! reference model for checking particle filters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    order_summaries, LatentPath, Model, ModelSpec, ObsSeries, StateSpaceModel, Transform,
};
use crate::error::{Error, Result};
use crate::rng::SimRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    spec: ModelSpec,
}

impl LinearGaussianModel {
    pub fn new(n: usize) -> Self {
        let names = ["median", "mad", "p10", "p20", "p75", "p90"];
        let label = |prefix: &str| names.iter().map(|s| format!("{prefix}_{s}")).collect();
        Self {
            spec: ModelSpec {
                name: "linear-gaussian".into(),
                param_names: vec!["sigma_x".into(), "sigma_y".into()],
                transforms: vec![Transform::Log, Transform::Log],
                n_obs: n,
                latent_grid: (0..=n).map(|j| j as f64).collect(),
                obs_times: (1..=n).map(|j| j as f64).collect(),
                fixed_constants: BTreeMap::from([("x0".to_string(), 0.0)]),
                obs_summary_labels: label("y"),
                latent_summary_labels: label("x"),
            },
        }
    }
}

impl Model for LinearGaussianModel {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn simulate(&self, theta: &[f64], rng: &mut SimRng) -> (LatentPath, ObsSeries) {
        let n = self.spec.n_obs;
        let mut states = vec![0.0];
        let mut values = Vec::with_capacity(n);
        let mut x = 0.0;
        for _ in 0..n {
            let tau: f64 = rng.sample(StandardNormal);
            let nu: f64 = rng.sample(StandardNormal);
            x += theta[0] * tau;
            states.push(x);
            values.push(x + theta[1] * nu);
        }
        (
            LatentPath {
                times: self.spec.latent_grid.clone(),
                states,
            },
            ObsSeries {
                times: self.spec.obs_times.clone(),
                values,
            },
        )
    }

    fn obs_summaries(&self, obs: &ObsSeries) -> Result<Vec<f64>> {
        if obs.is_empty() {
            return Err(Error::EmptySample);
        }
        Ok(order_summaries(&obs.values, &mut Vec::new()).to_vec())
    }

    fn latent_summaries(&self, path: &LatentPath, _obs: &ObsSeries) -> Result<Vec<f64>> {
        if path.states.len() < 2 {
            return Err(Error::EmptySample);
        }
        Ok(order_summaries(&path.states[1..], &mut Vec::new()).to_vec())
    }
}

impl StateSpaceModel for LinearGaussianModel {
    fn initial_state(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn steps_per_obs(&self) -> usize {
        1
    }

    fn propagate(&self, theta: &[f64], _obs_index: usize, prev: f64, rng: &mut SimRng, out: &mut [f64]) {
        let tau: f64 = rng.sample(StandardNormal);
        out[0] = prev + theta[0] * tau;
    }

    fn obs_log_density(&self, theta: &[f64], y: f64, x: f64) -> f64 {
        let var = theta[1] * theta[1];
        -0.5 * (LN_2PI + var.ln() + (y - x) * (y - x) / var)
    }
}
