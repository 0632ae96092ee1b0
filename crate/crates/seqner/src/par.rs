//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over the global
//! rayon pool; without it they degrade to plain iteration. Callers only
//! use them where result order is fixed by the input order, so outputs
//! are identical either way.

use crate::error::{Error, Result};

/// Caps the global rayon pool. Call at most once, before any parallel
/// work. A no-op without the `parallel` feature.
pub fn configure_threads(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::InvalidConfig("jobs must be >= 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    Ok(())
}

#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Sequential map with the same signature as [`par_map`], kept for
/// benchmarking the two paths against each other.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
