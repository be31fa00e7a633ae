//! Optional worker pool. Work is always split into the same indexed units
//! and results are returned in index order, so output does not depend on
//! the number of threads.

use rayon::prelude::*;

pub struct Executor {
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    pub fn sequential() -> Self {
        Self { pool: None }
    }

    /// `threads == 0` runs everything on the calling thread.
    pub fn new(threads: usize) -> Self {
        if threads == 0 {
            return Self::sequential();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => Self { pool: Some(pool) },
            Err(e) => {
                log::warn!("could not start {threads} worker threads ({e}); running sequentially");
                Self::sequential()
            }
        }
    }

    /// Reads `TINC_THREADS` (unset or unparsable means 0).
    pub fn from_env() -> Self {
        let threads = std::env::var("TINC_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0);
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(0, |p| p.current_num_threads())
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}
