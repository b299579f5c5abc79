//! Execution policy for data-parallel inner loops.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] maps over a rayon
//! pool; without it both policies run sequentially. Results are identical
//! either way because every work item owns its own random stream.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            Exec::Parallel => par_map(n, f),
        }
    }
}

/// Runs `f(0..n)` on a pool of `workers` threads (sequentially when
/// `workers <= 1` or without the `parallel` feature). Completion order is
/// unspecified; callers collect results themselves.
pub fn for_each_pooled<F>(n: usize, workers: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => return pool.install(|| (0..n).into_par_iter().for_each(f)),
            Err(e) => log::warn!("could not build a {workers}-thread pool ({e}); running sequentially"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    (0..n).for_each(f);
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let a = Exec::Sequential.map(100, |i| i * i);
        let b = Exec::Parallel.map(100, |i| i * i);
        assert_eq!(a, b);
    }

    #[test]
    fn pooled_visits_every_index_once() {
        let seen = std::sync::Mutex::new(Vec::new());
        for_each_pooled(50, 3, |i| seen.lock().unwrap().push(i));
        let mut v = seen.into_inner().unwrap();
        v.sort_unstable();
        assert_eq!(v, (0..50).collect::<Vec<_>>());
    }
}
