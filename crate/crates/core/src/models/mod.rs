//! Benchmark data-generating models behind a common simulator interface.
//!
//! A [`Model`] simulates a latent path and an observation series and reduces
//! both to summary vectors. Models that also expose a Markov transition and an
//! observation density implement [`StateSpaceModel`] so they can be filtered;
//! those with closed-form complete-data M-steps implement
//! [`CompleteDataModel`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::stats::{mad_with, percentile_sorted};

pub mod gk;
pub mod linear_gaussian;
pub mod nlg;
pub mod theophylline;

pub use gk::GkModel;
pub use linear_gaussian::LinearGaussianModel;
pub use nlg::NlgModel;
pub use theophylline::TheophyllineModel;

/// Map between a parameter's natural scale and the unconstrained working
/// scale used by optimizers and random-walk proposals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// `w = ln(θ)`, for `θ > 0`.
    Log,
    /// `w = ln(θ + shift)`, for `θ > -shift`.
    ShiftedLog(f64),
}

impl Transform {
    pub fn to_working(self, natural: f64) -> f64 {
        match self {
            Transform::Identity => natural,
            Transform::Log => natural.ln(),
            Transform::ShiftedLog(s) => (natural + s).ln(),
        }
    }

    pub fn to_natural(self, working: f64) -> f64 {
        match self {
            Transform::Identity => working,
            Transform::Log => working.exp(),
            Transform::ShiftedLog(s) => working.exp() - s,
        }
    }

    /// `ln |dθ/dw|` at working value `w`.
    pub fn log_jacobian(self, working: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Log | Transform::ShiftedLog(_) => working,
        }
    }

    pub fn admits(self, natural: f64) -> bool {
        natural.is_finite()
            && match self {
                Transform::Identity => true,
                Transform::Log => natural > 0.0,
                Transform::ShiftedLog(s) => natural > -s,
            }
    }
}

/// Static description of a model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub param_names: Vec<String>,
    pub transforms: Vec<Transform>,
    pub n_obs: usize,
    pub latent_grid: Vec<f64>,
    pub obs_times: Vec<f64>,
    pub fixed_constants: BTreeMap<String, f64>,
    pub obs_summary_labels: Vec<String>,
    pub latent_summary_labels: Vec<String>,
}

impl ModelSpec {
    pub fn n_params(&self) -> usize {
        self.param_names.len()
    }

    pub fn to_working(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.transforms)
            .map(|(v, t)| t.to_working(*v))
            .collect()
    }

    pub fn to_natural(&self, working: &[f64]) -> Vec<f64> {
        working
            .iter()
            .zip(&self.transforms)
            .map(|(v, t)| t.to_natural(*v))
            .collect()
    }

    pub fn log_jacobian(&self, working: &[f64]) -> f64 {
        working
            .iter()
            .zip(&self.transforms)
            .map(|(v, t)| t.log_jacobian(*v))
            .sum()
    }

    /// Whether `theta` satisfies the parameter constraints.
    pub fn admits(&self, theta: &[f64]) -> bool {
        theta.len() == self.n_params()
            && theta.iter().zip(&self.transforms).all(|(v, t)| t.admits(*v))
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        if !self.admits(theta) {
            return Err(Error::InvalidArgument(format!(
                "{} parameters {:?} violate constraints",
                self.name, theta
            )));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_summary_labels.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_summary_labels.len()
    }

    pub fn constant(&self, key: &str) -> f64 {
        self.fixed_constants[key]
    }
}

/// Latent-state trajectory on the model's latent grid (index 0 is `X_0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPath {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
}

/// Observations at the sampling times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ObsSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Labelled summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryVector {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

pub trait Model: Send + Sync {
    fn spec(&self) -> &ModelSpec;

    /// One draw of latent path and observations at natural-scale `theta`.
    fn simulate(&self, theta: &[f64], rng: &mut SimRng) -> (LatentPath, ObsSeries);

    /// `S(Y)` for an observation series.
    fn obs_summaries(&self, obs: &ObsSeries) -> Result<Vec<f64>>;

    /// `S(X)` for a latent path (with its paired observations where needed).
    fn latent_summaries(&self, path: &LatentPath, obs: &ObsSeries) -> Result<Vec<f64>>;

    /// Simulated joint summary `(S(y*), S(x*))`.
    fn simulate_joint_summaries(&self, theta: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        let (path, obs) = self.simulate(theta, rng);
        let mut s = self.obs_summaries(&obs)?;
        s.extend(self.latent_summaries(&path, &obs)?);
        Ok(s)
    }

    /// Simulated observation summaries `S(y*)` only.
    fn simulate_obs_summaries(&self, theta: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        let (_, obs) = self.simulate(theta, rng);
        self.obs_summaries(&obs)
    }
}

/// A model with one-dimensional Markov latent state observed at `n` times.
///
/// Between consecutive observations the latent state moves through
/// `steps_per_obs` grid points; the last one coincides with the observation
/// time.
pub trait StateSpaceModel: Model {
    fn initial_state(&self, theta: &[f64]) -> f64;

    fn steps_per_obs(&self) -> usize;

    /// Fills `out` (length `steps_per_obs`) with the latent segment leading
    /// from `prev` (at observation `obs_index - 1`, or `X_0`) to observation
    /// `obs_index` (zero-based).
    fn propagate(&self, theta: &[f64], obs_index: usize, prev: f64, rng: &mut SimRng, out: &mut [f64]);

    /// `log p(y | x)`.
    fn obs_log_density(&self, theta: &[f64], y: f64, x: f64) -> f64;
}

/// Closed-form exponential-family SAEM machinery for a state-space model.
pub trait CompleteDataModel: StateSpaceModel {
    /// Complete-data sufficient statistic `S_c(Y, X)`.
    fn suffstats(&self, obs: &ObsSeries, path: &LatentPath) -> Result<Vec<f64>>;

    /// Maximizer of the complete log-likelihood given averaged statistics;
    /// `None` when the statistics imply inadmissible parameters.
    fn mstep(&self, s: &[f64]) -> Option<Vec<f64>>;
}

/// `(median, MAD, P10, P20, P75, P90)` of a series.
pub fn order_summaries(xs: &[f64], scratch: &mut Vec<f64>) -> [f64; 6] {
    scratch.clear();
    scratch.extend_from_slice(xs);
    scratch.sort_unstable_by(f64::total_cmp);
    let sorted = &scratch[..];
    let med = percentile_sorted(sorted, 50.0);
    let p10 = percentile_sorted(sorted, 10.0);
    let p20 = percentile_sorted(sorted, 20.0);
    let p75 = percentile_sorted(sorted, 75.0);
    let p90 = percentile_sorted(sorted, 90.0);
    let mad = mad_with(xs, med, scratch);
    [med, mad, p10, p20, p75, p90]
}

/// Linear interpolation of `(times, values)` at `t` (clamped to the range).
pub fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let n = times.len();
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let hi = times.partition_point(|&s| s < t);
    if times[hi] == t {
        return values[hi];
    }
    let lo = hi - 1;
    let w = (t - times[lo]) / (times[hi] - times[lo]);
    values[lo] + w * (values[hi] - values[lo])
}

/// Builds a boxed model by name, using the default constants for each.
pub fn by_name(name: &str, options: &ModelOptions) -> Result<Box<dyn Model>> {
    match name {
        "nlg" => Ok(Box::new(NlgModel::new(options.n_obs.unwrap_or(50)))),
        "linear-gaussian" => Ok(Box::new(LinearGaussianModel::new(options.n_obs.unwrap_or(50)))),
        "theophylline" => Ok(Box::new(TheophyllineModel::standard())),
        "gk" => Ok(Box::new(GkModel::new(
            options.n_obs.unwrap_or(500),
            options.nu.unwrap_or(gk::DEFAULT_NU),
        )?)),
        other => Err(Error::Config(format!("unknown model `{other}`"))),
    }
}

/// Run-level model configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    pub n_obs: Option<usize>,
    /// Log-shift constant for g-and-k summaries.
    pub nu: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_round_trip() {
        for t in [Transform::Identity, Transform::Log, Transform::ShiftedLog(0.5)] {
            let w = t.to_working(0.3);
            assert!((t.to_natural(w) - 0.3).abs() < 1e-15);
        }
        assert!(!Transform::Log.admits(0.0));
        assert!(Transform::ShiftedLog(0.5).admits(-0.4));
        assert!(!Transform::ShiftedLog(0.5).admits(-0.5));
    }

    #[test]
    fn order_summaries_constant() {
        let s = order_summaries(&[2.5; 9], &mut Vec::new());
        assert_eq!(s, [2.5, 0.0, 2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn order_summaries_one_to_hundred() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = order_summaries(&xs, &mut Vec::new());
        // type-7: h = 99 q / 100
        assert_eq!(s[0], 50.5);
        assert_eq!(s[1], 25.0);
        assert!((s[2] - 10.9).abs() < 1e-12);
        assert!((s[3] - 20.8).abs() < 1e-12);
        assert!((s[4] - 75.25).abs() < 1e-12);
        assert!((s[5] - 90.1).abs() < 1e-12);
    }

    #[test]
    fn interpolation() {
        let t = [0.0, 1.0, 2.0];
        let v = [0.0, 10.0, 30.0];
        assert_eq!(interpolate(&t, &v, 1.0), 10.0);
        assert_eq!(interpolate(&t, &v, 1.5), 20.0);
        assert_eq!(interpolate(&t, &v, -1.0), 0.0);
        assert_eq!(interpolate(&t, &v, 5.0), 30.0);
    }
}
