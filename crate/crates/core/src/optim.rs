//! Nelder–Mead simplex minimization with an iteration budget.
//!
//! Objectives may be noisy and may fail; a failed or non-finite evaluation
//! counts as `+∞`. The result is always the best point ever evaluated, not
//! the final simplex.

use crate::error::{Error, Result};

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

/// Relative size of the initial simplex edges.
pub const INITIAL_STEP: f64 = 0.05;
/// Initial edge for a zero coordinate.
pub const ZERO_STEP: f64 = 0.00025;

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub iterations: usize,
}

/// Simplex vertices sorted by value, plus best-so-far bookkeeping.
#[derive(Debug, Clone)]
pub struct SimplexState {
    pub vertices: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub iteration: usize,
    pub best: (Vec<f64>, f64),
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Minimizes `f` from `x0` for `max_iters` iterations.
pub fn nelder_mead<F>(f: F, x0: &[f64], max_iters: usize) -> Result<NmResult>
where
    F: FnMut(&[f64]) -> f64,
{
    nelder_mead_with(f, x0, max_iters, |_| {})
}

/// As [`nelder_mead`], calling `on_iter` with the state after every iteration.
pub fn nelder_mead_with<F, C>(mut f: F, x0: &[f64], max_iters: usize, mut on_iter: C) -> Result<NmResult>
where
    F: FnMut(&[f64]) -> f64,
    C: FnMut(&SimplexState),
{
    if x0.is_empty() || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteStart);
    }
    let p = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], best: &mut (Vec<f64>, f64)| {
        evals += 1;
        let v = sanitize(f(x));
        if v < best.1 {
            *best = (x.to_vec(), v);
        }
        v
    };

    let mut best = (x0.to_vec(), f64::INFINITY);
    let f0 = eval(x0, &mut best);
    best = (x0.to_vec(), f0);
    if max_iters == 0 {
        return Ok(NmResult {
            x: best.0,
            value: best.1,
            evals,
            iterations: 0,
        });
    }

    let mut vertices = vec![x0.to_vec()];
    let mut values = vec![f0];
    for i in 0..p {
        let mut v = x0.to_vec();
        v[i] = if v[i] != 0.0 {
            v[i] * (1.0 + INITIAL_STEP)
        } else {
            ZERO_STEP
        };
        values.push(eval(&v, &mut best));
        vertices.push(v);
    }

    let mut state = SimplexState {
        vertices,
        values,
        iteration: 0,
        best,
    };
    let mut order: Vec<usize> = (0..=p).collect();
    let mut centroid = vec![0.0; p];
    let point = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(w).map(|(ci, wi)| ci + t * (ci - wi)).collect()
    };

    for it in 1..=max_iters {
        order.sort_by(|&a, &b| state.values[a].total_cmp(&state.values[b]));
        state.vertices = order.iter().map(|&i| state.vertices[i].clone()).collect();
        state.values = order.iter().map(|&i| state.values[i]).collect();
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for v in &state.vertices[..p] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / p as f64;
            }
        }
        let worst = state.vertices[p].clone();
        let (f_best, f_second, f_worst) = (state.values[0], state.values[p - 1], state.values[p]);

        let xr = point(&centroid, &worst, REFLECT);
        let fr = eval(&xr, &mut state.best);
        let mut shrink = false;
        if fr < f_best {
            let xe = point(&centroid, &worst, EXPAND);
            let fe = eval(&xe, &mut state.best);
            if fe < fr {
                state.vertices[p] = xe;
                state.values[p] = fe;
            } else {
                state.vertices[p] = xr;
                state.values[p] = fr;
            }
        } else if fr < f_second {
            state.vertices[p] = xr;
            state.values[p] = fr;
        } else if fr < f_worst {
            let xc = point(&centroid, &xr, -CONTRACT);
            let fc = eval(&xc, &mut state.best);
            if fc <= fr {
                state.vertices[p] = xc;
                state.values[p] = fc;
            } else {
                shrink = true;
            }
        } else {
            let xcc = point(&centroid, &worst, -CONTRACT);
            let fcc = eval(&xcc, &mut state.best);
            if fcc < f_worst {
                state.vertices[p] = xcc;
                state.values[p] = fcc;
            } else {
                shrink = true;
            }
        }
        if shrink {
            let anchor = state.vertices[0].clone();
            for i in 1..=p {
                let v: Vec<f64> = anchor
                    .iter()
                    .zip(&state.vertices[i])
                    .map(|(a, x)| a + SHRINK * (x - a))
                    .collect();
                state.values[i] = eval(&v, &mut state.best);
                state.vertices[i] = v;
            }
        }
        state.iteration = it;
        on_iter(&state);
    }

    Ok(NmResult {
        x: state.best.0,
        value: state.best.1,
        evals,
        iterations: max_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)
    }

    #[test]
    fn quadratic_minimum() {
        let f = |x: &[f64]| x.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
        let r = nelder_mead(f, &[0.0, 0.0, 0.0], 200).unwrap();
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-4), "{:?}", r.x);
    }

    #[test]
    fn zero_iterations_evaluates_start_only() {
        let r = nelder_mead(|x| x[0] * x[0] + 3.0, &[2.0], 0).unwrap();
        assert_eq!(r.x, vec![2.0]);
        assert_eq!(r.value, 7.0);
        assert_eq!(r.evals, 1);
    }

    #[test]
    fn rosenbrock_from_classic_start() {
        let r = nelder_mead(rosenbrock, &[-1.2, 1.0], 500).unwrap();
        assert!(r.value < 1e-6, "f = {}", r.value);
    }

    #[test]
    fn non_finite_start_rejected() {
        assert!(matches!(nelder_mead(|_| 0.0, &[f64::NAN], 10), Err(Error::NonFiniteStart)));
    }

    #[test]
    fn failures_are_dominated() {
        // the half-space x < 0 fails; the optimum sits on the feasible side
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.5).powi(2) + x[1].powi(2) };
        let r = nelder_mead(f, &[3.0, 1.0], 300).unwrap();
        assert!(r.value.is_finite());
        assert!((r.x[0] - 0.5).abs() < 1e-3 && r.x[1].abs() < 1e-3);
    }

    #[test]
    fn best_so_far_is_monotone() {
        let mut history = Vec::new();
        nelder_mead_with(rosenbrock, &[-1.2, 1.0], 100, |s| history.push(s.best.1)).unwrap();
        assert_eq!(history.len(), 100);
        assert!(history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn best_is_minimum_over_all_evaluations() {
        let mut seen = Vec::new();
        let r = nelder_mead(
            |x| {
                let v = rosenbrock(x);
                seen.push(v);
                v
            },
            &[0.5, 2.0],
            40,
        )
        .unwrap();
        assert_eq!(r.evals, seen.len());
        assert_eq!(r.value, seen.iter().copied().fold(f64::INFINITY, f64::min));
    }

    proptest! {
        #[test]
        fn start_value_never_worsened(x0 in prop::collection::vec(-3.0f64..3.0, 1..5), iters in 0usize..30) {
            let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum::<f64>();
            let start = f(&x0);
            let r = nelder_mead(f, &x0, iters).unwrap();
            prop_assert!(r.value <= start);
            prop_assert_eq!(f(&r.x), r.value);
        }
    }
}
