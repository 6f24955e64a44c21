//! Data-parallel helpers with a sequential fallback.
//!
//! Reductions split the index range into fixed-size chunks and combine the
//! per-chunk partials strictly in chunk order, so results are bitwise
//! identical for any thread count and for both execution modes.

use std::ops::Range;

/// Chunk length used by the deterministic reductions.
pub const DEFAULT_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled, otherwise
    /// runs sequentially.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

fn chunk_ranges(len: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(len))
        .collect()
}

/// Maps each index through `f`, preserving order.
pub fn map_indices<T, F>(exec: Execution, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Evaluates `partial` on consecutive chunks of `0..len` and folds the
/// partials left to right with `combine`. Returns `None` for `len == 0`.
pub fn chunked_reduce<A, P, C>(
    exec: Execution,
    len: usize,
    chunk: usize,
    partial: P,
    combine: C,
) -> Option<A>
where
    A: Send,
    P: Fn(usize, Range<usize>) -> A + Sync + Send,
    C: Fn(A, A) -> A,
{
    let ranges = chunk_ranges(len, chunk);
    let partials = map_indices(exec, ranges.len(), |c| partial(c, ranges[c].clone()));
    partials.into_iter().reduce(combine)
}

/// Configures the global rayon pool. A no-op without the `parallel` feature
/// or when the pool was already initialised.
pub fn init_threads(threads: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            log::debug!("rayon pool already initialised; ignoring thread count {n}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
