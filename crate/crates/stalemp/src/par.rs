//! Row-loop scheduling. With the `parallel` feature the loops fan out over the
//! rayon pool; without it they run in place. Each closure owns a disjoint output
//! row and performs its own reductions in index order, so both schedules produce
//! bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum rows per rayon split; keeps tiny kernels from paying fork overhead.
const MIN_ROWS_PER_SPLIT: usize = 16;

/// Applies `f(row_index, row)` to each `width`-sized chunk of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(width > 0 && out.len() % width == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(width)
            .with_min_len(MIN_ROWS_PER_SPLIT)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Fills `out[i] = f(i)` for scalar-per-index maps.
pub fn for_each_index<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_iter_mut()
            .with_min_len(MIN_ROWS_PER_SPLIT * 16)
            .enumerate()
            .for_each(|(i, v)| *v = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
    }
}

/// Builds the global rayon pool capped at `threads` workers. Call once at
/// startup; later calls are ignored (the pool can only be built once).
#[cfg(feature = "parallel")]
pub fn init_thread_pool(threads: usize) {
    if threads == 0 {
        return;
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

#[cfg(not(feature = "parallel"))]
pub fn init_thread_pool(_threads: usize) {}

/// Reads the STALEMP_THREADS cap from the environment, if set and sane.
pub fn env_thread_cap() -> Option<usize> {
    std::env::var("STALEMP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}
