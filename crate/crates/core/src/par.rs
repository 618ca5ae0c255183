//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature disabled, [`Parallelism::Parallel`] runs
//! sequentially. Results are always returned in input order, so callers that
//! fold them in order stay bitwise deterministic regardless of thread count.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// `f(i, &items[i])` for every item, in input order.
pub fn map_indexed<T, R, F>(items: &[T], mode: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = mode;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Runs `job` inside a pool of `threads` workers when parallelism is compiled
/// in; otherwise runs it directly.
pub fn with_threads<R: Send>(threads: usize, job: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        return pool.install(job);
    }
    let _ = threads;
    job()
}
