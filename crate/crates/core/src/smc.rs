//! Bootstrap particle filter with ESS-triggered multinomial resampling and
//! single-path extraction through the particle genealogy.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::models::{LatentPath, ObsSeries, StateSpaceModel};
use crate::rng::SimRng;

/// Particle count `M` and resampling threshold `M̄`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    pub particles: usize,
    pub threshold: usize,
}

/// Full history of a filter pass.
///
/// Step `j` (zero-based) covers the move from observation `j - 1` (or `X_0`)
/// to observation `j`.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub particles: usize,
    pub threshold: usize,
    pub steps_per_obs: usize,
    pub x0: f64,
    pub times: Vec<f64>,
    /// `segments[j][m * G..(m + 1) * G]`: latent segment of particle `m` at step `j`.
    pub segments: Vec<Vec<f64>>,
    /// Normalized weights after reweighting at step `j`.
    pub weights: Vec<Vec<f64>>,
    /// `ancestors[j][m]`: particle at step `j - 1` that particle `m` at step `j`
    /// descends from (identity at step 0 and after steps without resampling).
    pub ancestors: Vec<Vec<usize>>,
    /// Whether resampling fired after step `j`.
    pub resampled: Vec<bool>,
}

impl ParticleEnsemble {
    pub fn n_steps(&self) -> usize {
        self.weights.len()
    }

    /// Value of particle `m` at observation `j`.
    pub fn state(&self, j: usize, m: usize) -> f64 {
        self.segments[j][(m + 1) * self.steps_per_obs - 1]
    }

    pub fn final_weights(&self) -> &[f64] {
        self.weights.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// `1 / Σ w²` for normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Multinomial resampling: `M` ancestor indices drawn i.i.d. from `weights`.
///
/// The uniforms are generated already sorted (normalized exponential
/// spacings), so one sweep over the cumulative weights suffices. The returned
/// indices are therefore in ascending order.
pub fn resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let m = weights.len();
    let mut spacings: Vec<f64> = (0..=m).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = spacings.iter().sum();
    let mut acc = 0.0;
    for s in spacings.iter_mut().take(m) {
        acc += *s;
        *s = acc / total;
    }
    // rounding can leave the last uniform above the final cumulative sum
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(m - 1);
    let mut out = Vec::with_capacity(m);
    let mut cum = weights[0];
    let mut i = 0;
    for &u in &spacings[..m] {
        while u > cum && i < last {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Normalizes log-weights in place into `out`; returns `log Σ exp(lw)`, or
/// `None` when every weight is zero.
fn normalize(log_w: &[f64], out: &mut Vec<f64>) -> Option<f64> {
    let max = log_w
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    out.clear();
    out.extend(log_w.iter().map(|&v| if v.is_nan() { 0.0 } else { (v - max).exp() }));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|w| *w /= sum);
    Some(max + sum.ln())
}

/// Runs the bootstrap filter at natural-scale `theta`.
///
/// Returns the ensemble history and the standard SMC log-likelihood estimate
/// `Σ_j log Σ_m w_{j-1}^{a_m} p(y_j | x_j^m)`. Resampling fires after step
/// `j < n - 1` whenever `ESS < M̄`.
pub fn bootstrap_filter<M: StateSpaceModel + ?Sized>(
    model: &M,
    theta: &[f64],
    obs: &ObsSeries,
    config: FilterConfig,
    rng: &mut SimRng,
) -> Result<(ParticleEnsemble, f64)> {
    let m = config.particles;
    if m == 0 {
        return Err(Error::InvalidArgument("particle filter needs M >= 1".into()));
    }
    if obs.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = obs.len();
    let g = model.steps_per_obs();
    let x0 = model.initial_state(theta);

    let mut segments: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut ancestors: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut resampled = Vec::with_capacity(n);

    let identity: Vec<usize> = (0..m).collect();
    // log of the (normalized) weight each particle carries into the next step
    let mut log_prev = vec![-(m as f64).ln(); m];
    let mut parents = identity.clone();
    let mut log_w = vec![0.0; m];
    let mut loglik = 0.0;

    for j in 0..n {
        let mut seg = vec![0.0; m * g];
        for (k, chunk) in seg.chunks_exact_mut(g).enumerate() {
            let prev = if j == 0 { x0 } else { segments[j - 1][(parents[k] + 1) * g - 1] };
            model.propagate(theta, j, prev, rng, chunk);
            log_w[k] = log_prev[parents[k]] + model.obs_log_density(theta, obs.values[j], chunk[g - 1]);
        }
        let mut w = Vec::with_capacity(m);
        let log_sum = normalize(&log_w, &mut w).ok_or(Error::FilterDegenerate { step: j + 1 })?;
        loglik += log_sum;
        segments.push(seg);
        ancestors.push(std::mem::replace(&mut parents, identity.clone()));

        let fire = j + 1 < n && ess(&w) < config.threshold as f64;
        if fire {
            parents = resample(&w, rng);
            log_prev.iter_mut().for_each(|v| *v = -(m as f64).ln());
        } else {
            for (lp, wk) in log_prev.iter_mut().zip(&w) {
                *lp = wk.ln();
            }
        }
        resampled.push(fire);
        weights.push(w);
    }

    let ensemble = ParticleEnsemble {
        particles: m,
        threshold: config.threshold,
        steps_per_obs: g,
        x0,
        times: model.spec().latent_grid.clone(),
        segments,
        weights,
        ancestors,
        resampled,
    };
    Ok((ensemble, loglik))
}

/// Draws `m'` from the final weights and traces its lineage back to `X_0`.
pub fn sample_genealogy_path(ensemble: &ParticleEnsemble, rng: &mut SimRng) -> LatentPath {
    let final_w = ensemble.final_weights();
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut b = final_w.len() - 1;
    for (i, w) in final_w.iter().enumerate() {
        cum += w;
        if u < cum {
            b = i;
            break;
        }
    }
    genealogy_path(ensemble, b)
}

/// Latent path of final-step particle `index` through its ancestry.
pub fn genealogy_path(ensemble: &ParticleEnsemble, index: usize) -> LatentPath {
    let g = ensemble.steps_per_obs;
    let n = ensemble.n_steps();
    let mut states = vec![0.0; n * g + 1];
    states[0] = ensemble.x0;
    let mut b = index;
    for j in (0..n).rev() {
        states[1 + j * g..1 + (j + 1) * g].copy_from_slice(&ensemble.segments[j][b * g..(b + 1) * g]);
        b = ensemble.ancestors[j][b];
    }
    LatentPath {
        times: ensemble.times.clone(),
        states,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LinearGaussianModel, Model, NlgModel};
    use crate::rng::seeded;
    use proptest::prelude::*;

    /// Exact log-likelihood of the random walk observed with noise.
    fn kalman_loglik(sx: f64, sy: f64, y: &[f64]) -> f64 {
        let (mut mean, mut var) = (0.0, 0.0);
        let mut ll = 0.0;
        for &yj in y {
            var += sx * sx;
            let s = var + sy * sy;
            let e = yj - mean;
            ll += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + e * e / s);
            let gain = var / s;
            mean += gain * e;
            var *= 1.0 - gain;
        }
        ll
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.01; 100]) - 100.0).abs() < 1e-9);
        assert_eq!(ess(&[0.0, 1.0, 0.0]), 1.0);
        assert!((ess(&[0.5, 0.25, 0.25]) - 1.0 / 0.375).abs() < 1e-12);
    }

    #[test]
    fn resample_point_mass() {
        let mut w = vec![0.0; 10];
        w[3] = 1.0;
        assert!(resample(&w, &mut seeded(1)).iter().all(|&i| i == 3));
    }

    #[test]
    fn resample_counts_are_multinomial() {
        // chi-square goodness of fit of pooled offspring counts to M·w
        let w = [0.1, 0.2, 0.3, 0.4];
        let mut rng = seeded(2);
        let mut counts = [0usize; 4];
        let reps = 10_000;
        for _ in 0..reps {
            for i in resample(&w, &mut rng) {
                counts[i] += 1;
            }
        }
        let total = (reps * 4) as f64;
        let chi2: f64 = counts
            .iter()
            .zip(w)
            .map(|(&c, p)| (c as f64 - total * p).powi(2) / (total * p))
            .sum();
        // 99.9% point of chi-square with 3 dof
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn resample_uniform_counts_per_particle() {
        let m = 20;
        let w = vec![1.0 / m as f64; m];
        let mut rng = seeded(3);
        let reps = 10_000;
        let mut counts = vec![0usize; m];
        for _ in 0..reps {
            for i in resample(&w, &mut rng) {
                counts[i] += 1;
            }
        }
        let expected = reps as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9% point of chi-square with 19 dof
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn resample_preserves_weighted_mean() {
        let x = [1.0, 5.0, -2.0, 7.0, 0.5];
        let w = [0.3, 0.1, 0.2, 0.25, 0.15];
        let target: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        let mut rng = seeded(4);
        let means: Vec<f64> = (0..4000)
            .map(|_| resample(&w, &mut rng).iter().map(|&i| x[i]).sum::<f64>() / 5.0)
            .collect();
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        let sd = (means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt();
        assert!((avg - target).abs() < 3.0 * sd / (means.len() as f64).sqrt());
    }

    #[test]
    fn loglik_close_to_kalman() {
        let model = LinearGaussianModel::new(20);
        let theta = [1.0, 0.7];
        let (_, obs) = model.simulate(&theta, &mut seeded(5));
        let exact = kalman_loglik(1.0, 0.7, &obs.values);
        let mut rng = seeded(6);
        let cfg = FilterConfig { particles: 500, threshold: 250 };
        let est: Vec<f64> = (0..50)
            .map(|_| bootstrap_filter(&model, &theta, &obs, cfg, &mut rng).unwrap().1)
            .collect();
        let mean = est.iter().sum::<f64>() / 50.0;
        let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 49.0).sqrt();
        // the log of an unbiased estimator is biased down by about var/2
        let corrected = mean + sd * sd / 2.0;
        assert!((corrected - exact).abs() < 3.0 * sd / 50f64.sqrt() + 0.05, "{corrected} vs {exact}");
    }

    #[test]
    fn likelihood_estimate_unbiased() {
        let model = LinearGaussianModel::new(5);
        let theta = [0.8, 0.5];
        let (_, obs) = model.simulate(&theta, &mut seeded(7));
        let exact = kalman_loglik(0.8, 0.5, &obs.values).exp();
        let mut rng = seeded(8);
        let cfg = FilterConfig { particles: 50, threshold: 25 };
        let est: Vec<f64> = (0..200)
            .map(|_| bootstrap_filter(&model, &theta, &obs, cfg, &mut rng).unwrap().1.exp())
            .collect();
        let mean = est.iter().sum::<f64>() / 200.0;
        let se = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 199.0).sqrt() / 200f64.sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn flat_likelihood_never_resamples() {
        let model = LinearGaussianModel::new(30);
        let (_, obs) = model.simulate(&[1.0, 1.0], &mut seeded(9));
        let theta = [1.0, 1e6];
        let cfg = FilterConfig { particles: 100, threshold: 10 };
        let (ens, _) = bootstrap_filter(&model, &theta, &obs, cfg, &mut seeded(10)).unwrap();
        assert!(ens.resampled.iter().all(|r| !r));
        assert!(ess(ens.final_weights()) > 99.0);
    }

    #[test]
    fn threshold_m_resamples_every_step_but_last() {
        let model = NlgModel::new(50);
        let theta = [5f64.sqrt(), 5f64.sqrt()];
        let (_, obs) = model.simulate(&theta, &mut seeded(11));
        let cfg = FilterConfig { particles: 200, threshold: 200 };
        let (ens, _) = bootstrap_filter(&model, &theta, &obs, cfg, &mut seeded(12)).unwrap();
        assert!(ens.resampled[..49].iter().all(|&r| r));
        assert!(!ens.resampled[49]);
    }

    #[test]
    fn zero_threshold_weights_multiply() {
        let model = LinearGaussianModel::new(4);
        let theta = [1.0, 1.0];
        let (_, obs) = model.simulate(&theta, &mut seeded(13));
        let cfg = FilterConfig { particles: 8, threshold: 0 };
        let (ens, _) = bootstrap_filter(&model, &theta, &obs, cfg, &mut seeded(14)).unwrap();
        assert!(ens.resampled.iter().all(|r| !r));
        let mut log_w = vec![0.0; 8];
        for j in 0..4 {
            for (k, lw) in log_w.iter_mut().enumerate() {
                *lw += model.obs_log_density(&theta, obs.values[j], ens.state(j, k));
            }
            let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = log_w.iter().map(|v| (v - max).exp()).sum();
            for (k, lw) in log_w.iter().enumerate() {
                assert!(((lw - max).exp() / sum - ens.weights[j][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_particle_path_is_its_trajectory() {
        let model = NlgModel::new(10);
        let theta = [1.0, 1.0];
        let (_, obs) = model.simulate(&theta, &mut seeded(15));
        let cfg = FilterConfig { particles: 1, threshold: 1 };
        let (ens, _) = bootstrap_filter(&model, &theta, &obs, cfg, &mut seeded(16)).unwrap();
        let path = sample_genealogy_path(&ens, &mut seeded(17));
        let direct: Vec<f64> = std::iter::once(0.0).chain((0..10).map(|j| ens.state(j, 0))).collect();
        assert_eq!(path.states, direct);
    }

    #[test]
    fn no_resampling_path_is_forward_trajectory() {
        let model = LinearGaussianModel::new(6);
        let theta = [1.0, 1.0];
        let (_, obs) = model.simulate(&theta, &mut seeded(18));
        let cfg = FilterConfig { particles: 5, threshold: 0 };
        let (ens, _) = bootstrap_filter(&model, &theta, &obs, cfg, &mut seeded(19)).unwrap();
        for k in 0..5 {
            let path = genealogy_path(&ens, k);
            for j in 0..6 {
                assert_eq!(path.states[j + 1], ens.state(j, k));
            }
        }
    }

    #[test]
    fn theophylline_segments_cover_fine_grid() {
        use crate::models::TheophyllineModel;
        let model = TheophyllineModel::standard();
        let theta = [0.05, 0.04, 0.1, 0.319];
        let (_, obs) = model.simulate(&theta, &mut seeded(20));
        let cfg = FilterConfig { particles: 50, threshold: 10 };
        let (ens, _) = bootstrap_filter(&model, &theta, &obs, cfg, &mut seeded(21)).unwrap();
        let path = sample_genealogy_path(&ens, &mut seeded(22));
        assert_eq!(path.states.len(), 601);
        assert_eq!(path.states[0], 8.0);
        assert!(path.states.iter().all(|&x| x > 0.0));
        // each segment ends where the next particle generation started from
        for j in 1..30 {
            let start = path.states[20 * j];
            let next = path.states[20 * j + 1];
            assert!((next - start).abs() < 2.0);
        }
    }

    #[test]
    fn degenerate_weights_name_step() {
        struct Impossible(LinearGaussianModel);
        impl Model for Impossible {
            fn spec(&self) -> &crate::models::ModelSpec {
                self.0.spec()
            }
            fn simulate(&self, theta: &[f64], rng: &mut SimRng) -> (LatentPath, ObsSeries) {
                self.0.simulate(theta, rng)
            }
            fn obs_summaries(&self, obs: &ObsSeries) -> Result<Vec<f64>> {
                self.0.obs_summaries(obs)
            }
            fn latent_summaries(&self, p: &LatentPath, o: &ObsSeries) -> Result<Vec<f64>> {
                self.0.latent_summaries(p, o)
            }
        }
        impl StateSpaceModel for Impossible {
            fn initial_state(&self, _: &[f64]) -> f64 {
                0.0
            }
            fn steps_per_obs(&self) -> usize {
                1
            }
            fn propagate(&self, t: &[f64], j: usize, p: f64, r: &mut SimRng, o: &mut [f64]) {
                self.0.propagate(t, j, p, r, o)
            }
            fn obs_log_density(&self, _: &[f64], y: f64, _: f64) -> f64 {
                if y > 100.0 { f64::NEG_INFINITY } else { 0.0 }
            }
        }
        let model = Impossible(LinearGaussianModel::new(5));
        let obs = ObsSeries { times: (1..=5).map(f64::from).collect(), values: vec![0.0, 0.0, 500.0, 0.0, 0.0] };
        let cfg = FilterConfig { particles: 10, threshold: 5 };
        let err = bootstrap_filter(&model, &[1.0, 1.0], &obs, cfg, &mut seeded(23)).unwrap_err();
        assert!(matches!(err, Error::FilterDegenerate { step: 3 }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn filter_invariants(seed in 0u64..10_000, m in 1usize..60, frac in 0.0f64..1.2) {
            let model = NlgModel::new(15);
            let theta = [1.5, 0.8];
            let mut rng = seeded(seed);
            let (_, obs) = model.simulate(&theta, &mut rng);
            let cfg = FilterConfig { particles: m, threshold: (frac * m as f64) as usize };
            let (ens, ll) = bootstrap_filter(&model, &theta, &obs, cfg, &mut rng).unwrap();
            prop_assert!(ll.is_finite());
            for (w, a) in ens.weights.iter().zip(&ens.ancestors) {
                prop_assert!(w.iter().all(|&v| v >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let e = ess(w);
                prop_assert!(e >= 1.0 - 1e-9 && e <= m as f64 + 1e-9);
                prop_assert!(a.iter().all(|&i| i < m));
            }
            let path = sample_genealogy_path(&ens, &mut rng);
            prop_assert_eq!(path.states.len(), 16);
        }

        #[test]
        fn resample_indices_valid(seed in 0u64..10_000, raw in prop::collection::vec(0.0f64..1.0, 1..40)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let idx = resample(&w, &mut seeded(seed));
            prop_assert_eq!(idx.len(), w.len());
            prop_assert!(idx.iter().all(|&i| i < w.len() && w[i] > 0.0));
        }
    }
}
