//! Ordered data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work runs on a rayon pool; without
//! it every helper degrades to a plain iterator. Output order always matches
//! input order.

/// How a batch of independent work items is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon-backed. Falls back to sequential when the crate is built
    /// without the `parallel` feature.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items` on at most `threads` workers, preserving order.
///
/// `threads` is a hard bound: a dedicated pool of that size is used so that
/// blocking work (network calls) never exceeds it.
pub fn map_bounded<T, R, F>(items: &[T], threads: usize, exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    let threads = threads.max(1);
    if !exec.is_parallel() || threads == 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    parallel::map_bounded(items, threads, f)
}

/// Maps `f` over `items` on the global pool, preserving order.
pub fn map<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if !exec.is_parallel() {
        return items.iter().map(f).collect();
    }
    parallel::map(items, f)
}

#[cfg(feature = "parallel")]
mod parallel {
    use rayon::prelude::*;

    pub fn map_bounded<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(|| {
                items
                    .par_iter()
                    .enumerate()
                    .map(|(i, t)| f(i, t))
                    .collect()
            }),
            Err(err) => {
                log::warn!("thread pool unavailable ({err}); running sequentially");
                items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
        }
    }

    pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
mod parallel {
    pub fn map_bounded<T, R, F>(items: &[T], _threads: usize, f: F) -> Vec<R>
    where
        F: Fn(usize, &T) -> R,
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }

    pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        F: Fn(&T) -> R,
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_in_both_modes() {
        let items: Vec<u64> = (0..500).collect();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let out = map_bounded(&items, 4, exec, |i, x| (i as u64, x * x));
            assert!(out.iter().enumerate().all(|(i, &(j, sq))| i as u64 == j && sq == j * j));
            let out = map(&items, exec, |x| x + 1);
            assert_eq!(out, (1..501).collect::<Vec<_>>());
        }
    }
}
