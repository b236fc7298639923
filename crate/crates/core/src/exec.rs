//! Data-parallel execution helpers.
//!
//! Kernels split their output into fixed-size chunks and hand each chunk
//! to a closure. With the `parallel` feature the chunks are processed by
//! rayon, otherwise (or when parallelism is switched off at runtime) they
//! run in order on the calling thread. Chunk boundaries never depend on
//! the mode or the thread count, so both paths produce bit-identical
//! results.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Below this many output elements a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const MIN_PARALLEL_WORK: usize = 4096;

/// Enables or disables rayon dispatch at runtime. No-op without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    #[cfg(feature = "parallel")]
    PARALLEL.store(enabled, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = enabled;
}

pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        PARALLEL.load(Ordering::Relaxed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Runs `f` with parallel dispatch forced to `enabled`, restoring the
/// previous setting afterwards.
pub fn with_parallel<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = parallel_enabled();
    set_parallel(enabled);
    let out = f();
    set_parallel(prev);
    out
}

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized piece of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && out.len() >= MIN_PARALLEL_WORK && out.len() > chunk_len {
        out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, preserving index order in the result.
pub fn map_range<R, F>(n: usize, work_per_item: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 && n.saturating_mul(work_per_item) >= MIN_PARALLEL_WORK {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work_per_item;
    (0..n).map(f).collect()
}

/// Configures the global rayon pool. Has no effect without the
/// `parallel` feature or when the pool is already initialised.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_output_in_both_modes() {
        for mode in [false, true] {
            let mut out = vec![0usize; 10_000];
            with_parallel(mode, || {
                for_each_chunk(&mut out, 333, |i, c| {
                    for (j, v) in c.iter_mut().enumerate() {
                        *v = i * 333 + j;
                    }
                })
            });
            assert!(out.iter().enumerate().all(|(i, &v)| i == v));
        }
    }

    #[test]
    fn map_range_keeps_order() {
        let v = map_range(5000, 10, |i| i * 2);
        assert_eq!(v[4999], 9998);
        assert!(v.windows(2).all(|w| w[1] == w[0] + 2));
    }
}
