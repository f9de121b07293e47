//! Switchable data parallelism.
//!
//! With the `parallel` feature the maps below fan out over rayon's pool;
//! without it, or after [`force_sequential`], they run as plain loops. Both
//! paths collect results in index order, and every numeric kernel in this
//! crate keeps its accumulation order fixed per output element, so the two
//! paths produce bitwise identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQ: AtomicBool = AtomicBool::new(false);

/// Route all maps through the sequential path, e.g. for `--threads 1` or
/// for benchmarking the fallback. Affects the whole process.
pub fn force_sequential(on: bool) {
    FORCE_SEQ.store(on, Ordering::SeqCst);
}

pub fn parallelism_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQ.load(Ordering::SeqCst)
}

/// Cap the worker count for the whole process. `0` keeps the default pool,
/// `1` forces the sequential path, larger values size the shared pool. Best
/// effort: a pool that is already running keeps its size.
pub fn configure_threads(threads: usize) {
    match threads {
        0 => {}
        1 => force_sequential(true),
        _n => {
            force_sequential(false);
            #[cfg(feature = "parallel")]
            {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(_n).build_global();
            }
        }
    }
}

/// `(0..n).map(f)` collected in index order.
#[cfg(feature = "parallel")]
pub fn map_indices<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    use rayon::prelude::*;
    if parallelism_enabled() {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

/// `(0..n).map(f)` collected in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indices<U: Send, F: Fn(usize) -> U + Sync + Send>(n: usize, f: F) -> Vec<U> {
    (0..n).map(f).collect()
}

/// `items.iter().map(f)` collected in input order.
#[cfg(feature = "parallel")]
pub fn map_slice<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    use rayon::prelude::*;
    if parallelism_enabled() {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// `items.iter().map(f)` collected in input order.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}
