//! Data-parallel execution helpers.
//!
//! Every hot loop in the crate runs through these functions. With the
//! `parallel` feature (default) the work is distributed with rayon; without
//! it, or after [`force_sequential`], the same closures run on the calling
//! thread. Work decomposition is fixed by input size (never by thread
//! count), and reductions happen in index order, so results are bitwise
//! identical in all modes.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is enabled.
/// Used by the benchmark suite to compare both execution modes in one build.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

/// True when work will actually be distributed across threads.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Order-preserving map over `0..n`.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Order-preserving map over an owned list of jobs.
pub fn map_jobs<T, R, F>(jobs: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return jobs.into_par_iter().map(f).collect();
    }
    jobs.into_iter().map(f).collect()
}

/// Run `f(i, job_i)` for every job, where each job owns a disjoint piece of
/// mutable state (e.g. an output view).
pub fn for_each_job<T, F>(jobs: Vec<T>, f: F)
where
    T: Send,
    F: Fn(usize, T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        jobs.into_par_iter().enumerate().for_each(|(i, job)| f(i, job));
        return;
    }
    for (i, job) in jobs.into_iter().enumerate() {
        f(i, job);
    }
}

/// Split `0..len` into ranges of at most `chunk` elements.
pub fn ranges(len: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    assert!(chunk > 0);
    let mut out = Vec::with_capacity(len.div_ceil(chunk));
    let mut start = 0;
    while start < len {
        let end = (start + chunk).min(len);
        out.push(start..end);
        start = end;
    }
    out
}
