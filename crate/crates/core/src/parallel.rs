//! Data-parallel helpers. With the `parallel` feature disabled every
//! helper runs sequentially; results are identical and index-ordered
//! either way.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether work actually fans out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// `(0..n).map(f)`, collected in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f` inside a pool capped at `threads` workers (parallel mode only).
    pub fn with_threads<T: Send>(self, threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
        #[cfg(feature = "parallel")]
        if let (Execution::Parallel, Some(t)) = (self, threads) {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build() {
                return pool.install(f);
            }
        }
        let _ = threads;
        f()
    }
}
