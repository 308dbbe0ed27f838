//! Data-parallel execution helpers.
//!
//! All parallelism in this crate funnels through [`map_indexed`]: every output
//! element is produced by exactly one task with a sequential inner loop, so
//! results are bit-identical whether the `parallel` feature is enabled or not,
//! and regardless of thread count. Reductions happen sequentially in index
//! order on the collected results.
//!
//! With the `parallel` feature (default) the work is distributed with rayon;
//! without it the same closures run on a plain iterator. For benchmarking the
//! two paths against each other in a single process, [`force_sequential`]
//! switches the parallel build over to the sequential path at runtime.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Which execution path the crate was built with.
#[cfg(feature = "parallel")]
pub const MODE: &str = "rayon";
#[cfg(not(feature = "parallel"))]
pub const MODE: &str = "sequential";

/// Force the sequential path even when the `parallel` feature is enabled.
/// Returns the previous value. No-op (always sequential) without the feature.
#[cfg(feature = "parallel")]
pub fn force_sequential(on: bool) -> bool {
    FORCE_SEQUENTIAL.swap(on, Ordering::SeqCst)
}

#[cfg(not(feature = "parallel"))]
pub fn force_sequential(_on: bool) -> bool {
    true
}

/// Whether calls will currently run sequentially.
pub fn is_sequential() -> bool {
    #[cfg(feature = "parallel")]
    {
        FORCE_SEQUENTIAL.load(Ordering::SeqCst)
    }
    #[cfg(not(feature = "parallel"))]
    {
        true
    }
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if is_sequential() {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Always-sequential variant, kept available so tests and benches can compare
/// against the dispatched path.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
