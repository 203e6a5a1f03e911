//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work fans out on a rayon pool sized
//! by the `SD_THREADS` environment variable (default: logical cores). Without
//! the feature everything runs sequentially. Results are bit-identical either
//! way: parallelism only ever splits independent work items, never reduction
//! order.

use std::cell::Cell;

#[cfg(feature = "parallel")]
use once_cell::sync::Lazy;

#[cfg(feature = "parallel")]
static POOL: Lazy<rayon::ThreadPool> = Lazy::new(|| {
    let threads = std::env::var("SD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(num_threads_default);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build thread pool")
});

#[cfg(feature = "parallel")]
fn num_threads_default() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with all parallel helpers forced onto the sequential path.
/// Used by the benchmark suite to compare both implementations in one run.
pub fn run_sequential<T>(f: impl FnOnce() -> T) -> T {
    FORCE_SEQUENTIAL.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.with(|flag| flag.get())
}

/// Number of worker threads the parallel path would use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        POOL.current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, min_per_thread: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() && threads() > 1 && n >= 2 && n * 2 >= min_per_thread {
            use rayon::prelude::*;
            return POOL.install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = min_per_thread;
    (0..n).map(f).collect()
}

/// Apply `f` to equal-size disjoint chunks of `out`, in parallel when the
/// total work is worth it. `f(chunk_index, chunk)` must fill its chunk from
/// the chunk index alone.
pub fn fill_chunks<F>(out: &mut [crate::Real], chunk: usize, work_per_chunk: usize, f: F)
where
    F: Fn(usize, &mut [crate::Real]) + Sync + Send,
{
    fill_chunks_generic(out, chunk, work_per_chunk, f)
}

/// [`fill_chunks`] over any element type.
pub fn fill_chunks_generic<T, F>(out: &mut [T], chunk: usize, work_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    let n_chunks = out.len() / chunk;
    #[cfg(feature = "parallel")]
    {
        // Rough cutoff: only fan out when every thread gets a few microseconds
        // of arithmetic; tiny tensors stay sequential.
        const MIN_WORK: usize = 16_384;
        if !sequential_forced() && threads() > 1 && n_chunks >= 2 && n_chunks * work_per_chunk >= MIN_WORK
        {
            use rayon::prelude::*;
            POOL.install(|| {
                out.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
            });
            return;
        }
    }
    let _ = work_per_chunk;
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
