//! Empirical moments, robust moments and order statistics.

use std::cell::RefCell;
use std::collections::HashMap;

use log::warn;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, Matrix, MomentPair, Vector};

/// Classical mean and unbiased covariance of `rows`.
pub fn sample_moments<T: AsRef<[f64]>>(rows: &[T]) -> Result<MomentPair> {
    let r = rows.len();
    if r < 2 {
        return Err(Error::TooFewRows { needed: 2, got: r });
    }
    let d = rows[0].as_ref().len();
    let mut mean = Vector::zeros(d);
    for row in rows {
        let row = row.as_ref();
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= r as f64;
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in rows {
        for ((c, v), m) in centered.iter_mut().zip(row.as_ref()).zip(mean.iter()) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in 0..=i {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = (r - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    MomentPair::new(mean, cov)
}

thread_local! {
    static CHI2_CACHE: RefCell<HashMap<(usize, u64), f64>> = RefCell::new(HashMap::new());
}

/// Quantile of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_quantile(dof: usize, p: f64) -> f64 {
    CHI2_CACHE.with(|cache| {
        *cache
            .borrow_mut()
            .entry((dof, p.to_bits()))
            .or_insert_with(|| {
                ChiSquared::new(dof as f64)
                    .expect("positive degrees of freedom")
                    .inverse_cdf(p)
            })
    })
}

fn squared_mahalanobis<T: AsRef<[f64]>>(rows: &[T], mp: &MomentPair) -> Option<Vec<f64>> {
    let l = cholesky(&mp.cov).ok().flatten()?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let diff = Vector::from_column_slice(row.as_ref()) - &mp.mean;
        let z = l.solve_lower_triangular(&diff)?;
        out.push(z.norm_squared());
    }
    Some(out)
}

/// Outlier-resistant moments: one chi-square trimming pass followed by a
/// median-based consistency rescaling of the covariance.
///
/// Falls back to [`sample_moments`] (with a warning) when the classical
/// covariance cannot be factored or fewer than `d + 1` rows survive.
pub fn robust_moments<T: AsRef<[f64]>>(rows: &[T]) -> Result<MomentPair> {
    let classical = sample_moments(rows)?;
    let d = classical.dim();
    let r = rows.len();
    if r < 2 * (d + 1) {
        return Err(Error::TooFewRows {
            needed: 2 * (d + 1),
            got: r,
        });
    }
    let Some(dist) = squared_mahalanobis(rows, &classical) else {
        if classical.cov.iter().any(|&v| v != 0.0) {
            warn!("robust moments: classical covariance not factorable, using classical moments");
        }
        return Ok(classical);
    };
    let cutoff = chi_square_quantile(d, 0.975);
    let survivors: Vec<&[f64]> = rows
        .iter()
        .zip(&dist)
        .filter(|(_, &d2)| d2 <= cutoff)
        .map(|(row, _)| row.as_ref())
        .collect();
    if survivors.len() < d + 1 {
        warn!(
            "robust moments: only {} of {} rows survive trimming, using classical moments",
            survivors.len(),
            r
        );
        return Ok(classical);
    }
    let mut trimmed = sample_moments(&survivors)?;
    let Some(mut dist) = squared_mahalanobis(rows, &trimmed) else {
        warn!("robust moments: trimmed covariance not factorable, using classical moments");
        return Ok(classical);
    };
    let scale = median_in_place(&mut dist) / chi_square_quantile(d, 0.5);
    if scale.is_finite() && scale > 0.0 {
        trimmed.cov *= scale;
    }
    Ok(trimmed)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation followed by one Halley refinement step.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "normal_quantile requires 0 < p < 1, got {p}");
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley step
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Type-7 percentile of already sorted data, `q` in percent.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Type-7 (linear interpolation) percentile, `q` in percent.
pub fn percentile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, q))
}

/// Median, reordering `xs` in the process.
pub fn median_in_place(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (lower, m, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(median_in_place(&mut xs.to_vec()))
}

/// Unscaled median absolute deviation, with `scratch` reused as workspace.
pub fn mad_with(xs: &[f64], center: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(xs.iter().map(|x| (x - center).abs()));
    median_in_place(scratch)
}

/// Unscaled median absolute deviation `median(|x - median(x)|)`.
pub fn mad(xs: &[f64]) -> Result<f64> {
    let m = median(xs)?;
    Ok(mad_with(xs, m, &mut Vec::with_capacity(xs.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    /// Bisection on the erf-based CDF.
    fn quantile_oracle(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn two_point_moments() {
        let mp = sample_moments(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert_eq!(mp.mean.as_slice(), &[1.0, 1.0]);
        assert_eq!(mp.cov, Matrix::from_element(2, 2, 2.0));
    }

    #[test]
    fn identical_rows_zero_covariance() {
        let rows = vec![vec![3.0, -1.0, 2.0]; 10];
        let mp = sample_moments(&rows).unwrap();
        assert_eq!(mp.cov, Matrix::zeros(3, 3));
        let rb = robust_moments(&rows).unwrap();
        assert_eq!(rb.mean.as_slice(), &[3.0, -1.0, 2.0]);
        assert_eq!(rb.cov, Matrix::zeros(3, 3));
    }

    #[test]
    fn too_few_rows() {
        assert!(matches!(
            sample_moments(&[vec![1.0]]),
            Err(Error::TooFewRows { needed: 2, got: 1 })
        ));
        assert!(robust_moments(&vec![vec![1.0, 2.0]; 5]).is_err());
    }

    fn gaussian_rows(n: usize, seed: u64) -> (Vec<Vec<f64>>, Matrix) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let l = Matrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 0.8, 0.0, -0.3, 0.2, 0.6]);
        let cov = &l * l.transpose();
        let rows = (0..n)
            .map(|_| {
                let z = Vector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
                let x = &l * z + Vector::from_vec(vec![1.0, -2.0, 0.5]);
                x.iter().copied().collect()
            })
            .collect();
        (rows, cov)
    }

    #[test]
    fn moments_of_known_gaussian_within_three_se() {
        let (rows, cov) = gaussian_rows(1000, 5);
        let mp = sample_moments(&rows).unwrap();
        let truth = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let se = (cov[(i, i)] / 1000.0).sqrt();
            assert!((mp.mean[i] - truth[i]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn robust_agrees_with_classical_on_clean_data() {
        let (rows, _) = gaussian_rows(4000, 7);
        let c = sample_moments(&rows).unwrap();
        let r = robust_moments(&rows).unwrap();
        for i in 0..3 {
            let s = c.cov[(i, i)].sqrt();
            assert!((r.mean[i] - c.mean[i]).abs() <= 0.1 * s);
            for j in 0..3 {
                let scale = (c.cov[(i, i)] * c.cov[(j, j)]).sqrt();
                assert!(
                    (r.cov[(i, j)] - c.cov[(i, j)]).abs() <= 0.1 * scale,
                    "entry ({i},{j}): {} vs {}",
                    r.cov[(i, j)],
                    c.cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn robust_trims_extreme_outlier() {
        let (mut rows, cov) = gaussian_rows(500, 8);
        let clean = sample_moments(&rows).unwrap();
        rows[17] = vec![1.0 + 100.0 * cov[(0, 0)].sqrt(), -2.0, 0.5];
        let contaminated = sample_moments(&rows).unwrap();
        let robust = robust_moments(&rows).unwrap();
        let sd = cov[(0, 0)].sqrt();
        // classical mean moves by ~0.2 sd; the robust one barely moves
        assert!((contaminated.mean[0] - clean.mean[0]).abs() > 0.1 * sd);
        assert!((robust.mean[0] - clean.mean[0]).abs() < 0.01 * clean.mean[0].abs().max(sd));
    }

    #[test]
    fn quantile_reference_points() {
        assert_eq!(normal_quantile(0.5), 0.0);
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
        assert!((normal_quantile(0.1) + 1.281552).abs() < 1e-6);
        assert!((normal_quantile(0.975) - quantile_oracle(0.975)).abs() < 1e-9);
        assert!((normal_quantile(0.1) - quantile_oracle(0.1)).abs() < 1e-9);
    }

    #[test]
    fn quantile_inverts_cdf_on_grid() {
        let mut x = -5.0;
        while x <= 5.0 {
            let p = normal_cdf(x);
            assert!((normal_quantile(p) - x).abs() < 1e-8, "x = {x}");
            assert!((normal_quantile(p) - quantile_oracle(p)).abs() < 1e-9);
            x += 0.05;
        }
    }

    #[test]
    fn percentile_type7() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&xs, 50.0).unwrap(), 3.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0).unwrap(), 2.5);
        // h = 4 * 0.25 = 1 -> sorted[1]
        assert_eq!(percentile(&xs, 25.0).unwrap(), 2.0);
        assert_eq!(percentile(&[4.0, 1.0, 3.0], 100.0).unwrap(), 4.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&xs, 101.0).is_err());
    }

    #[test]
    fn mad_examples() {
        assert_eq!(mad(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(mad(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 1.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
    }

    #[test]
    fn chi_square_median_reference() {
        // chi2 with 2 dof is exponential(1/2): median 2 ln 2
        assert_relative_eq!(chi_square_quantile(2, 0.5), 2.0 * 2f64.ln(), epsilon = 1e-8);
    }

    proptest! {
        #[test]
        fn mad_shift_invariant(xs in proptest::collection::vec(-100.0f64..100.0, 1..40), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            prop_assert!((mad(&xs).unwrap() - mad(&shifted).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn percentile_within_range(xs in proptest::collection::vec(-100.0f64..100.0, 1..40), q in 0.0f64..100.0) {
            let p = percentile(&xs, q).unwrap();
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p >= lo && p <= hi);
        }
    }
}
