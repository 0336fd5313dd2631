//! Data-parallel dispatch for the hot kernels.
//!
//! Work is always split into disjoint output chunks, each computed by the same
//! sequential code, so the parallel and sequential paths are bit-identical.
//! With the `parallel` feature disabled everything runs on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Chunks smaller than this many multiply-adds are not worth a task.
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Turns the parallel path on or off at runtime (no effect without the `parallel` feature).
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Configures the global worker pool size. Returns false when the pool was
/// already initialised or the feature is off.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `out`.
/// `work_per_chunk` is a rough cost estimate used to skip dispatch for tiny jobs.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, work_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk_len == 0 {
        return;
    }
    let chunks = out.len() / chunk_len;
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && chunks > 1 && chunks * work_per_chunk >= MIN_PARALLEL_WORK {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = (chunks, work_per_chunk, MIN_PARALLEL_WORK);
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` to a vector, in parallel when enabled. Output order is index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
