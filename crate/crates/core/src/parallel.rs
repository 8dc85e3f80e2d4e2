//! Deterministic parallel map.
//!
//! Every item is computed independently from its index and results come back
//! in index order, so any reduction performed afterwards sees the same
//! sequence of values whatever the number of workers.

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

fn pool(workers: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let pools = POOLS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = pools.lock().expect("worker pool registry poisoned");
    guard
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("failed to start worker pool"),
            )
        })
        .clone()
}

/// Maps `f` over `0..n`. `workers == 1` runs inline; `0` uses all cores.
pub fn par_map<T, F>(workers: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if workers == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let workers = if workers == 0 { rayon::current_num_threads().max(1) } else { workers };
    pool(workers).install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Fallible variant: the first error in index order wins.
pub fn try_par_map<T, E, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    par_map(workers, n, f).into_iter().collect()
}
