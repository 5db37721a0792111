//! Optional intra-op parallelism.
//!
//! `MAMBAVF_THREADS` caps the worker count. Unset or 0 keeps everything on the
//! calling thread. Results are always combined in input order, so output is
//! bit-identical regardless of the setting.

use std::sync::OnceLock;

use rayon::prelude::*;
use rayon::ThreadPool;

pub const THREADS_ENV: &str = "MAMBAVF_THREADS";

/// Worker count requested through the environment (0 = single-threaded).
pub fn requested_threads() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

fn pool() -> Option<&'static ThreadPool> {
    static POOL: OnceLock<Option<ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = requested_threads();
        if n <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
    })
    .as_ref()
}

/// Whether a worker pool is active.
pub fn is_parallel() -> bool {
    pool().is_some()
}

/// Map `f` over `items`, in parallel when a pool is configured; results keep input order.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match pool() {
        Some(p) if items.len() > 1 => p.install(|| items.par_iter().map(&f).collect()),
        _ => items.iter().map(f).collect(),
    }
}
