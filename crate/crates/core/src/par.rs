//! Data-parallel map over independent runs. Without the `parallel` feature
//! every mode runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Execution {
    Sequential,
    /// Rayon's global pool, or a dedicated pool of `jobs` threads.
    #[default]
    Parallel,
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, jobs: Option<usize>, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        Execution::Sequential => items.iter().map(f).collect(),
        Execution::Parallel => parallel_map(jobs, items, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(jobs: Option<usize>, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let run = || items.par_iter().map(&f).collect();
    match jobs {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        },
        _ => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(_jobs: Option<usize>, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Whether this build can actually run in parallel.
pub const fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let items: Vec<u64> = (0..200).collect();
        let sq = |x: &u64| x * x;
        let a = map(Execution::Sequential, None, &items, sq);
        let b = map(Execution::Parallel, None, &items, sq);
        let c = map(Execution::Parallel, Some(3), &items, sq);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a[7], 49);
    }
}
