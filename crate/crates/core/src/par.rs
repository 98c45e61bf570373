//! Data-parallel helpers. With the `parallel` feature these dispatch to rayon;
//! without it they run the same closures sequentially. Output order is always
//! the index order, so results never depend on the worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum items per rayon task for per-particle loops.
#[cfg(feature = "parallel")]
const MIN_PARTICLES_PER_TASK: usize = 256;

/// `(0..n).map(f).collect()`, in parallel when enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Applies `f(i, row, extra_i)` to each `width`-sized row of `rows` together
/// with the matching element of `extra`.
pub fn for_each_row<E, F>(rows: &mut [f64], width: usize, extra: &mut [E], f: F)
where
    E: Send,
    F: Fn(usize, &mut [f64], &mut E) + Sync + Send,
{
    debug_assert_eq!(rows.len(), width * extra.len());
    #[cfg(feature = "parallel")]
    {
        rows.par_chunks_mut(width)
            .zip(extra.par_iter_mut())
            .enumerate()
            .with_min_len(MIN_PARTICLES_PER_TASK)
            .for_each(|(i, (row, e))| f(i, row, e));
    }
    #[cfg(not(feature = "parallel"))]
    {
        rows.chunks_mut(width)
            .zip(extra.iter_mut())
            .enumerate()
            .for_each(|(i, (row, e))| f(i, row, e));
    }
}

/// Whether this build dispatches to rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
