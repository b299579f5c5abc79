//! Noisy g-and-k distribution
//!
//! `x = A + B [1 + c·tanh(g r / 2)] (1 + r²)^k r` with `r ~ N(0, 1)`, `c = 0.8`,
//! `g = 2` fixed, observed as `y = x + σ_ε ε`. Parameters `(A, B, k, σ_ε)`.
//! Summaries are robust quantile-based statistics passed through
//! `log(S̃ + ν)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{LatentPath, Model, ModelSpec, ObsSeries, Transform};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::stats::percentile_sorted;

pub const C: f64 = 0.8;
pub const G: f64 = 2.0;
pub const DEFAULT_NU: f64 = 50.0;

pub const SUMMARY_LABELS: [&str; 8] = ["s_a", "s_b", "s_g", "s_k", "p20", "p30", "p70", "p80"];

/// Quantile function evaluated at a standard-normal deviate `r`.
#[inline]
pub fn quantile(a: f64, b: f64, k: f64, r: f64) -> f64 {
    a + b * (1.0 + C * (0.5 * G * r).tanh()) * (1.0 + r * r).powf(k) * r
}

#[derive(Debug, Clone)]
pub struct GkModel {
    spec: ModelSpec,
    nu: f64,
}

impl GkModel {
    pub fn new(n: usize, nu: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument("g-and-k sample needs n >= 2".into()));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidArgument(format!("log-shift nu must be positive, got {nu}")));
        }
        let labels = |prefix: &str| SUMMARY_LABELS.iter().map(|s| format!("{prefix}_{s}")).collect();
        let index: Vec<f64> = (1..=n).map(|j| j as f64).collect();
        let spec = ModelSpec {
            name: "gk".into(),
            param_names: vec!["a".into(), "b".into(), "k".into(), "sigma_eps".into()],
            transforms: vec![
                Transform::Identity,
                Transform::Log,
                Transform::ShiftedLog(0.5),
                Transform::Log,
            ],
            n_obs: n,
            latent_grid: index.clone(),
            obs_times: index,
            fixed_constants: BTreeMap::from([
                ("c".to_string(), C),
                ("g".to_string(), G),
                ("nu".to_string(), nu),
            ]),
            obs_summary_labels: labels("y"),
            latent_summary_labels: labels("x"),
        };
        Ok(Self { spec, nu })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    fn draw(&self, theta: &[f64], rng: &mut SimRng) -> (Vec<f64>, Vec<f64>) {
        let (a, b, k, se) = (theta[0], theta[1], theta[2], theta[3]);
        let n = self.spec.n_obs;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let r: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let xi = quantile(a, b, k, r);
            x.push(xi);
            y.push(xi + se * e);
        }
        (x, y)
    }
}

/// Raw statistics `(S_A, S_B, S_g, S_k, P20, P30, P70, P80)` of a sample.
pub fn raw_summaries(xs: &[f64], scratch: &mut Vec<f64>) -> [f64; 8] {
    scratch.clear();
    scratch.extend_from_slice(xs);
    scratch.sort_unstable_by(f64::total_cmp);
    let p = |q: f64| percentile_sorted(scratch, q);
    let s_a = p(50.0);
    let s_b = p(75.0) - p(25.0);
    let s_g = (p(75.0) + p(25.0) - 2.0 * s_a) / s_b;
    let s_k = (p(87.5) - p(62.5) + p(37.5) - p(12.5)) / s_b;
    [s_a, s_b, s_g, s_k, p(20.0), p(30.0), p(70.0), p(80.0)]
}

/// `log(S̃ + ν)` for each raw statistic.
pub fn log_shift(raw: &[f64; 8], nu: f64, prefix: &str) -> Result<Vec<f64>> {
    raw.iter()
        .zip(SUMMARY_LABELS)
        .map(|(&v, label)| {
            let arg = v + nu;
            if arg > 0.0 && arg.is_finite() {
                Ok(arg.ln())
            } else {
                Err(Error::LogShift {
                    label: format!("{prefix}_{label}"),
                    value: arg,
                })
            }
        })
        .collect()
}

/// Log-shifted g-and-k summaries of a sample.
pub fn gk_summaries(xs: &[f64], nu: f64) -> Result<Vec<f64>> {
    if xs.len() < 2 {
        return Err(Error::EmptySample);
    }
    log_shift(&raw_summaries(xs, &mut Vec::new()), nu, "y")
}

impl Model for GkModel {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn simulate(&self, theta: &[f64], rng: &mut SimRng) -> (LatentPath, ObsSeries) {
        let (states, values) = self.draw(theta, rng);
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
        if obs.len() < 2 {
            return Err(Error::EmptySample);
        }
        log_shift(&raw_summaries(&obs.values, &mut Vec::new()), self.nu, "y")
    }

    /// Same statistics as the observations, applied to the noise-free `x`.
    fn latent_summaries(&self, path: &LatentPath, _obs: &ObsSeries) -> Result<Vec<f64>> {
        if path.states.len() < 2 {
            return Err(Error::EmptySample);
        }
        log_shift(&raw_summaries(&path.states, &mut Vec::new()), self.nu, "x")
    }

    fn simulate_joint_summaries(&self, theta: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        let (x, y) = self.draw(theta, rng);
        let mut scratch = Vec::with_capacity(x.len());
        let mut s = log_shift(&raw_summaries(&y, &mut scratch), self.nu, "y")?;
        s.extend(log_shift(&raw_summaries(&x, &mut scratch), self.nu, "x")?);
        Ok(s)
    }

    fn simulate_obs_summaries(&self, theta: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        let (_, y) = self.draw(theta, rng);
        log_shift(&raw_summaries(&y, &mut Vec::with_capacity(y.len())), self.nu, "y")
    }
}
