//! Theophylline pharmacokinetic SDE
//!
//! `dX = (Dose·Ka·Ke/Cl · e^{-Ka t} - Ke X) dt + σ √X dW`, integrated by
//! Euler–Maruyama on a fine grid and observed with additive Gaussian error.
//! Parameters `(Ke, Cl, σ, σ_ε)`; `Ka`, `Dose` and `X_0` are fixed.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    interpolate, CompleteDataModel, LatentPath, Model, ModelSpec, ObsSeries, StateSpaceModel,
    Transform,
};
use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::stats::{mad_with, median_in_place};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// State value substituted when an Euler step lands at or below zero.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheophyllineConstants {
    pub dose: f64,
    pub ka: f64,
    pub x0: f64,
    pub t0: f64,
    /// Spacing of the sampling times.
    pub delta: f64,
    /// Euler steps per sampling interval.
    pub steps_per_obs: usize,
    pub n_obs: usize,
}

impl Default for TheophyllineConstants {
    fn default() -> Self {
        Self {
            dose: 4.0,
            ka: 1.492,
            x0: 8.0,
            t0: 0.0,
            delta: 1.0,
            steps_per_obs: 20,
            n_obs: 30,
        }
    }
}

impl TheophyllineConstants {
    pub fn h(&self) -> f64 {
        self.delta / self.steps_per_obs as f64
    }
}

#[derive(Debug, Clone)]
pub struct TheophyllineModel {
    spec: ModelSpec,
    c: TheophyllineConstants,
    /// `Dose·Ka·e^{-Ka τ_i}` at each grid point but the last.
    absorption: Vec<f64>,
    /// Grid index of each sampling time (sampling times lie on the grid, so
    /// linear interpolation reduces to a lookup).
    obs_index: Vec<usize>,
}

impl TheophyllineModel {
    /// Dose 4, Ka 1.492, X_0 = 8, h = 0.05, 30 hourly observations.
    pub fn standard() -> Self {
        Self::new(TheophyllineConstants::default())
    }

    pub fn new(c: TheophyllineConstants) -> Self {
        let g = c.steps_per_obs;
        let n_grid = c.n_obs * g;
        let latent_grid: Vec<f64> = (0..=n_grid)
            .map(|i| c.t0 + i as f64 * c.delta / g as f64)
            .collect();
        let obs_times: Vec<f64> = (1..=c.n_obs).map(|j| c.t0 + j as f64 * c.delta).collect();
        let absorption = latent_grid[..n_grid]
            .iter()
            .map(|t| c.dose * c.ka * (-c.ka * t).exp())
            .collect();
        let spec = ModelSpec {
            name: "theophylline".into(),
            param_names: vec!["ke".into(), "cl".into(), "sigma".into(), "sigma_eps".into()],
            transforms: vec![Transform::Log; 4],
            n_obs: c.n_obs,
            latent_grid,
            obs_times,
            fixed_constants: BTreeMap::from([
                ("dose".to_string(), c.dose),
                ("ka".to_string(), c.ka),
                ("x0".to_string(), c.x0),
                ("h".to_string(), c.h()),
            ]),
            obs_summary_labels: vec!["y_median".into(), "y_mad".into(), "y_slope".into()],
            latent_summary_labels: vec![
                "x_median".into(),
                "x_mad".into(),
                "x_sigma_qv".into(),
                "residual_rms".into(),
            ],
        };
        let obs_index = (1..=c.n_obs).map(|j| j * g).collect();
        Self {
            spec,
            c,
            absorption,
            obs_index,
        }
    }

    pub fn constants(&self) -> &TheophyllineConstants {
        &self.c
    }

    /// Fine-grid points `N` (excluding `X_0`).
    pub fn n_grid(&self) -> usize {
        self.absorption.len()
    }

    /// Euler–Maruyama steps from grid index `start`, writing into `out`.
    #[inline]
    fn euler(&self, theta: &[f64], start: usize, prev: f64, rng: &mut SimRng, out: &mut [f64]) {
        let (ke, cl, sigma) = (theta[0], theta[1], theta[2]);
        let h = self.c.h();
        let diff_scale = sigma * h.sqrt();
        let ratio = ke / cl;
        let mut x = prev;
        for (k, slot) in out.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let a = self.absorption[start + k];
            let next = x + (ratio * a - ke * x) * h + diff_scale * x.sqrt() * z;
            x = if next > 0.0 { next } else { POSITIVITY_FLOOR };
            *slot = x;
        }
    }

    fn simulate_states(&self, theta: &[f64], rng: &mut SimRng) -> Vec<f64> {
        let mut states = vec![0.0; self.n_grid() + 1];
        states[0] = self.c.x0;
        let (head, tail) = states.split_at_mut(1);
        self.euler(theta, 0, head[0], rng, tail);
        states
    }

    fn observe(&self, theta: &[f64], states: &[f64], rng: &mut SimRng) -> Vec<f64> {
        self.obs_index
            .iter()
            .map(|&i| {
                let e: f64 = rng.sample(StandardNormal);
                states[i] + theta[3] * e
            })
            .collect()
    }

    fn obs_stats(values: &[f64], times: &[f64], scratch: &mut Vec<f64>) -> [f64; 3] {
        scratch.clear();
        scratch.extend_from_slice(values);
        let med = median_in_place(scratch);
        let mad = mad_with(values, med, scratch);
        let n = values.len();
        let slope = (values[n - 1] - values[0]) / (times[n - 1] - times[0]);
        [med, mad, slope]
    }

    fn latent_stats(&self, states: &[f64], obs: &[f64], scratch: &mut Vec<f64>) -> [f64; 4] {
        scratch.clear();
        scratch.extend_from_slice(states);
        let med = median_in_place(scratch);
        let mad = mad_with(states, med, scratch);
        let qv = sigma_hat_qv_grid(&self.spec.latent_grid, states);
        let rss: f64 = self
            .obs_index
            .iter()
            .zip(obs)
            .map(|(&i, y)| (y - states[i]).powi(2))
            .sum();
        [med, mad, qv, (rss / obs.len() as f64).sqrt()]
    }
}

/// Quadratic-variation estimate of `σ` for diffusion coefficient `σ √X`:
/// `sqrt(Σ (X_{i+1} - X_i)² / Σ X_i (t_{i+1} - t_i))`.
pub fn sigma_hat_qv(path: &LatentPath) -> f64 {
    sigma_hat_qv_grid(&path.times, &path.states)
}

fn sigma_hat_qv_grid(times: &[f64], states: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..states.len() - 1 {
        let dx = states[i + 1] - states[i];
        num += dx * dx;
        den += states[i] * (times[i + 1] - times[i]);
    }
    (num / den).sqrt()
}

impl Model for TheophyllineModel {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn simulate(&self, theta: &[f64], rng: &mut SimRng) -> (LatentPath, ObsSeries) {
        let states = self.simulate_states(theta, rng);
        let values = self.observe(theta, &states, rng);
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
        Ok(Self::obs_stats(&obs.values, &obs.times, &mut Vec::new()).to_vec())
    }

    fn latent_summaries(&self, path: &LatentPath, obs: &ObsSeries) -> Result<Vec<f64>> {
        if path.states.len() != self.spec.latent_grid.len() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.latent_grid.len(),
                got: path.states.len(),
            });
        }
        Ok(self.latent_stats(&path.states, &obs.values, &mut Vec::new()).to_vec())
    }

    fn simulate_joint_summaries(&self, theta: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        let states = self.simulate_states(theta, rng);
        let obs = self.observe(theta, &states, rng);
        let mut scratch = Vec::with_capacity(states.len());
        let mut s = Vec::with_capacity(7);
        s.extend(Self::obs_stats(&obs, &self.spec.obs_times, &mut scratch));
        s.extend(self.latent_stats(&states, &obs, &mut scratch));
        Ok(s)
    }

    fn simulate_obs_summaries(&self, theta: &[f64], rng: &mut SimRng) -> Result<Vec<f64>> {
        let states = self.simulate_states(theta, rng);
        let obs = self.observe(theta, &states, rng);
        Ok(Self::obs_stats(&obs, &self.spec.obs_times, &mut Vec::with_capacity(obs.len())).to_vec())
    }
}

impl StateSpaceModel for TheophyllineModel {
    fn initial_state(&self, _theta: &[f64]) -> f64 {
        self.c.x0
    }

    fn steps_per_obs(&self) -> usize {
        self.c.steps_per_obs
    }

    fn propagate(&self, theta: &[f64], obs_index: usize, prev: f64, rng: &mut SimRng, out: &mut [f64]) {
        self.euler(theta, obs_index * self.c.steps_per_obs, prev, rng, out);
    }

    fn obs_log_density(&self, theta: &[f64], y: f64, x: f64) -> f64 {
        let var = theta[3] * theta[3];
        -0.5 * (LN_2PI + var.ln() + (y - x) * (y - x) / var)
    }
}

impl CompleteDataModel for TheophyllineModel {
    /// `(β̂_1, β̂_2, S_σ², S_σε²)` from the Euler-increment regression
    /// `V = β_1 C_1 + β_2 C_2`, with `β_1 = Ke/Cl` and `β_2 = Ke`.
    ///
    /// `S_σ²` is the residual sum of squares of that regression divided by
    /// `h`, i.e. the `σ²` statistic evaluated at the fitted `(Ke, Cl)`.
    fn suffstats(&self, obs: &ObsSeries, path: &LatentPath) -> Result<Vec<f64>> {
        let x = &path.states;
        if x.len() != self.n_grid() + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.n_grid() + 1,
                got: x.len(),
            });
        }
        if x.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument("latent path must be strictly positive".into()));
        }
        let h = self.c.h();
        let (mut c11, mut c12, mut c22, mut c1v, mut c2v) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut rows = Vec::with_capacity(self.n_grid());
        for i in 1..x.len() {
            let root = x[i - 1].sqrt();
            let v = (x[i] - x[i - 1]) / root;
            let a = self.absorption[i - 1] * h / root;
            let b = -root * h;
            c11 += a * a;
            c12 += a * b;
            c22 += b * b;
            c1v += a * v;
            c2v += b * v;
            rows.push((v, a, b));
        }
        let det = c11 * c22 - c12 * c12;
        if !(det.abs() > 1e-12 * c11 * c22) {
            return Err(Error::SingularDesign);
        }
        let beta1 = (c22 * c1v - c12 * c2v) / det;
        let beta2 = (c11 * c2v - c12 * c1v) / det;
        let s_sigma: f64 = rows
            .iter()
            .map(|(v, a, b)| (v - beta1 * a - beta2 * b).powi(2))
            .sum::<f64>()
            / h;
        let grid = &self.spec.latent_grid;
        let s_eps: f64 = obs
            .times
            .iter()
            .zip(&obs.values)
            .map(|(&t, y)| (y - interpolate(grid, x, t)).powi(2))
            .sum();
        Ok(vec![beta1, beta2, s_sigma, s_eps])
    }

    fn mstep(&self, s: &[f64]) -> Option<Vec<f64>> {
        theo_mstep(s, self.c.n_obs, self.n_grid())
    }
}

/// `Ke = β̂_2`, `Cl = β̂_2/β̂_1`, `σ = √(S_σ²/N)`, `σ_ε = √(S_σε²/n)`; `None`
/// unless both regression coefficients are positive.
pub fn theo_mstep(s: &[f64], n: usize, n_grid: usize) -> Option<Vec<f64>> {
    let (beta1, beta2) = (s[0], s[1]);
    if !(beta1 > 0.0 && beta2 > 0.0) || s.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sigma = (s[2] / n_grid as f64).max(VARIANCE_FLOOR).sqrt();
    let sigma_eps = (s[3] / n as f64).max(VARIANCE_FLOOR).sqrt();
    Some(vec![beta2, beta2 / beta1, sigma, sigma_eps])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    const TRUTH: [f64; 4] = [0.05, 0.04, 0.1, 0.319_374_388_453_426_2];

    fn noise_free(model: &TheophyllineModel) -> (LatentPath, ObsSeries) {
        model.simulate(&[0.05, 0.04, 0.0, 0.0], &mut seeded(0))
    }

    #[test]
    fn grid_contains_sampling_times() {
        let m = TheophyllineModel::standard();
        assert_eq!(m.spec().latent_grid.len(), 601);
        for (j, t) in m.spec().obs_times.iter().enumerate() {
            assert_eq!(m.spec().latent_grid[(j + 1) * 20], *t);
        }
        assert_eq!(m.spec().latent_grid[600], 30.0);
    }

    #[test]
    fn noise_free_path_positive_and_decaying() {
        let m = TheophyllineModel::standard();
        let (path, obs) = noise_free(&m);
        assert!(path.states.iter().all(|&x| x > 0.0));
        let tail = &path.states[200..];
        assert!(tail.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(obs.values, (1..=30).map(|j| path.states[20 * j]).collect::<Vec<_>>());
    }

    /// Deterministic Euler integration with arbitrary step, for convergence checks.
    fn ode_at_30(h: f64) -> f64 {
        let (dose, ka, ke, cl) = (4.0, 1.492, 0.05, 0.04);
        let steps = (30.0 / h).round() as usize;
        let mut x = 8.0;
        for i in 0..steps {
            let t = i as f64 * h;
            x += (dose * ka * ke / cl * (-ka * t).exp() - ke * x) * h;
        }
        x
    }

    #[test]
    fn euler_first_order_convergence() {
        let m = TheophyllineModel::standard();
        let (path, _) = noise_free(&m);
        assert!((path.states[600] - ode_at_30(0.05)).abs() < 1e-10);
        let reference = ode_at_30(1e-4);
        let e1 = (ode_at_30(0.05) - reference).abs();
        let e2 = (ode_at_30(0.025) - reference).abs();
        let ratio = e1 / e2;
        assert!((1.8..2.2).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn true_parameters_generate_decaying_data() {
        let m = TheophyllineModel::standard();
        let mut rng = seeded(21);
        let mut negative = 0;
        for _ in 0..50 {
            let (path, obs) = m.simulate(&TRUTH, &mut rng);
            assert!(path.states.iter().all(|&x| x > 0.0));
            let s = m.obs_summaries(&obs).unwrap();
            if s[2] < 0.0 {
                negative += 1;
            }
        }
        assert!(negative >= 45, "slope negative in only {negative}/50 datasets");
    }

    #[test]
    fn fixed_seed_reproducible() {
        let m = TheophyllineModel::standard();
        assert_eq!(m.simulate(&TRUTH, &mut seeded(3)), m.simulate(&TRUTH, &mut seeded(3)));
    }

    #[test]
    fn summaries_of_simple_series() {
        let m = TheophyllineModel::standard();
        let times: Vec<f64> = (1..=30).map(f64::from).collect();
        let linear = ObsSeries { values: times.iter().map(|t| 2.0 - 0.3 * t).collect(), times: times.clone() };
        assert!((m.obs_summaries(&linear).unwrap()[2] + 0.3).abs() < 1e-12);
        let constant = ObsSeries { values: vec![4.0; 30], times };
        assert_eq!(m.obs_summaries(&constant).unwrap(), vec![4.0, 0.0, 0.0]);

        let flat = LatentPath { times: m.spec().latent_grid.clone(), states: vec![5.0; 601] };
        let s = m.latent_summaries(&flat, &ObsSeries { values: vec![5.0; 30], times: m.spec().obs_times.clone() }).unwrap();
        assert_eq!(s, vec![5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigma_hat_qv_algebra() {
        let times: Vec<f64> = (0..11).map(|i| i as f64 * 0.1).collect();
        let path = LatentPath { times: times.clone(), states: vec![3.0; 11] };
        assert_eq!(sigma_hat_qv(&path), 0.0);
        // alternating path: every increment is ±a, states alternate 5 and 5 + a
        let alt = |a: f64| (0..11).map(|i| 5.0 + (i % 2) as f64 * a).collect::<Vec<_>>();
        let den = |a: f64| (0..10).map(|i| (5.0 + (i % 2) as f64 * a) * 0.1).sum::<f64>();
        let q = |a: f64| sigma_hat_qv(&LatentPath { times: times.clone(), states: alt(a) });
        assert!((q(0.1).powi(2) * den(0.1) - 10.0 * 0.01).abs() < 1e-12);
        assert!((q(0.2).powi(2) * den(0.2) - 4.0 * q(0.1).powi(2) * den(0.1)).abs() < 1e-12);
    }

    fn mean_qv(steps_per_obs: usize, seed: u64) -> f64 {
        let m = TheophyllineModel::new(TheophyllineConstants { steps_per_obs, ..Default::default() });
        let mut rng = seeded(seed);
        let theta = [0.05, 0.04, 0.1, 0.3];
        (0..100).map(|_| sigma_hat_qv(&m.simulate(&theta, &mut rng).0)).sum::<f64>() / 100.0
    }

    #[test]
    fn sigma_hat_qv_bias_from_drift_shrinks_with_h() {
        // the absorption-phase drift inflates the squared increments by O(h)
        let coarse = mean_qv(20, 77);
        let fine = mean_qv(200, 78);
        assert!((coarse / 0.1 - 1.0).abs() < 0.25, "h = 0.05: {coarse}");
        assert!((fine / 0.1 - 1.0).abs() < 0.05, "h = 0.005: {fine}");
        assert!((fine - 0.1).abs() < (coarse - 0.1).abs());
    }

    #[test]
    fn sigma_hat_qv_driftless_path() {
        let mut rng = seeded(79);
        for h in [0.05, 0.005] {
            let n = (30.0 / h) as usize;
            let times: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
            let mean = (0..100)
                .map(|_| {
                    let mut states = vec![8.0];
                    for _ in 0..n {
                        let x: f64 = *states.last().unwrap();
                        let z: f64 = rng.sample(StandardNormal);
                        states.push(x + 0.01 * (x * h).sqrt() * z);
                    }
                    sigma_hat_qv(&LatentPath { times: times.clone(), states })
                })
                .sum::<f64>()
                / 100.0;
            assert!((mean / 0.01 - 1.0).abs() < 0.05, "h = {h}: {mean}");
        }
    }

    #[test]
    fn regression_exact_on_noise_free_path() {
        let m = TheophyllineModel::standard();
        let (path, obs) = noise_free(&m);
        let s = m.suffstats(&obs, &path).unwrap();
        assert!((s[1] - 0.05).abs() < 1e-6);
        assert!((s[1] / s[0] - 0.04).abs() < 1e-6);
        assert!(s[2].abs() < 1e-12);
        assert_eq!(s[3], 0.0);
        let theta = m.mstep(&s).unwrap();
        assert!((theta[0] - 0.05).abs() < 1e-6 && (theta[1] - 0.04).abs() < 1e-6);
    }

    #[test]
    fn singular_design_detected() {
        let m = TheophyllineModel::standard();
        // X proportional to e^{-Ka t} makes the two covariates collinear
        let states: Vec<f64> = m.spec().latent_grid.iter().map(|t| 3.0 * (-1.492 * t).exp()).collect();
        let path = LatentPath { times: m.spec().latent_grid.clone(), states };
        let obs = ObsSeries { times: m.spec().obs_times.clone(), values: vec![0.0; 30] };
        assert!(matches!(m.suffstats(&obs, &path), Err(Error::SingularDesign)));
    }

    #[test]
    fn s_sigma_scales_with_sigma_squared() {
        // the regression residual of a noisy path is linear in the noise,
        // so scaling the shocks by c scales S_σ² by c² (up to the drift fit)
        let m = TheophyllineModel::standard();
        let a = m.suffstats(&m.simulate(&[0.05, 0.04, 0.05, 0.1], &mut seeded(5)).1, &m.simulate(&[0.05, 0.04, 0.05, 0.1], &mut seeded(5)).0).unwrap();
        let b = m.suffstats(&m.simulate(&[0.05, 0.04, 0.1, 0.1], &mut seeded(5)).1, &m.simulate(&[0.05, 0.04, 0.1, 0.1], &mut seeded(5)).0).unwrap();
        let ratio = b[2] / a[2];
        assert!((ratio / 4.0 - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn mstep_examples() {
        let n_grid = 600;
        let s = [1.25, 0.05, 0.01 * n_grid as f64, 0.102 * 30.0];
        let theta = theo_mstep(&s, 30, n_grid).unwrap();
        assert!((theta[2] - 0.1).abs() < 1e-12);
        assert!((theta[3] - 0.102f64.sqrt()).abs() < 1e-12);
        assert!((theta[3] - 0.319).abs() < 1e-3);
        assert!((theta[1] - 0.04).abs() < 1e-12);
        assert!(theo_mstep(&[-1.0, 0.05, 1.0, 1.0], 30, n_grid).is_none());
        assert!(theo_mstep(&[1.0, 0.0, 1.0, 1.0], 30, n_grid).is_none());
    }

    #[test]
    fn mstep_matches_grid_search() {
        // Euler complete log-likelihood in (Ke, Cl, σ², σ_ε²), maximized on a grid
        // around the closed-form update
        let m = TheophyllineModel::standard();
        let (path, obs) = m.simulate(&[0.05, 0.04, 0.1, 0.3], &mut seeded(31));
        let s = m.suffstats(&obs, &path).unwrap();
        let est = m.mstep(&s).unwrap();
        let h = 0.05;
        let x = &path.states;
        let loglik = |ke: f64, cl: f64, s2: f64| {
            let mut l = 0.0;
            for i in 1..x.len() {
                let t = (i - 1) as f64 * h;
                let mean = x[i - 1] + (4.0 * 1.492 * ke / cl * (-1.492 * t).exp() - ke * x[i - 1]) * h;
                let var = s2 * x[i - 1] * h;
                l += -0.5 * (var.ln() + (x[i] - mean).powi(2) / var);
            }
            l
        };
        let at_est = loglik(est[0], est[1], est[2] * est[2]);
        for dk in [-0.02, 0.0, 0.02] {
            for dc in [-0.02, 0.0, 0.02] {
                for ds in [-0.02, 0.0, 0.02] {
                    let l = loglik(est[0] * (1.0 + dk), est[1] * (1.0 + dc), est[2] * est[2] * (1.0 + ds));
                    assert!(l <= at_est + 1e-9);
                }
            }
        }
        let eps_ll = |s2: f64| obs.values.iter().enumerate().map(|(j, y)| {
            -0.5 * (s2.ln() + (y - x[20 * (j + 1)]).powi(2) / s2)
        }).sum::<f64>();
        let v = est[3] * est[3];
        assert!(eps_ll(v) >= eps_ll(v * 1.02) && eps_ll(v) >= eps_ll(v * 0.98));
    }
}
