//! Indexed map helpers that run on rayon when the `parallel` feature is
//! enabled and fall back to a plain loop otherwise. Callers must make the
//! closure a pure function of the index so results do not depend on the
//! execution mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept for benchmarks and as the reference path.
pub(crate) fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runtime switch between the two paths; lets one implementation serve both
/// the default entry point and its `_serial` twin.
pub(crate) fn map_indexed_mode<T, F>(n: usize, sequential: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if sequential {
        map_indexed_seq(n, f)
    } else {
        map_indexed(n, f)
    }
}
