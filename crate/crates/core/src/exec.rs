//! Order-preserving maps over independent work items.
//!
//! With the `parallel` feature (default) these fan out over the rayon
//! thread pool; without it, or when [`Execution::Sequential`] is requested,
//! they run as plain iterators. Results always come back in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    /// Whether this build can actually run in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }
}

/// Runs `f` with parallel maps limited to `workers` threads. `None` keeps
/// the global pool. Without the `parallel` feature this just calls `f`.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            return pool.install(f);
        }
    }
    let _ = workers;
    f()
}

/// Threads a parallel map would use right now.
pub fn current_workers() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    1
}

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    Execution::default().map(items, f)
}

pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    Execution::default().try_map(items, f)
}
