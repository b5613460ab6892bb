//! Execution policy for the data-parallel loops.
//!
//! With the `parallel` feature (default) the `Rayon` policy fans work out on
//! the global rayon pool; without it every policy runs sequentially. Results
//! never depend on the policy: all parallel loops are index-keyed maps whose
//! outputs are collected in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Rayon,
}

impl Exec {
    /// Whether this policy actually runs on multiple threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Rayon
    }

    /// `items.iter().map(f).collect()`, possibly in parallel, order preserved.
    pub fn map<I, O, F>(self, items: &[I], f: F) -> Vec<O>
    where
        I: Sync,
        O: Send,
        F: Fn(&I) -> O + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Rayon {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// `(0..n).map(f).collect()`, possibly in parallel, order preserved.
    pub fn map_range<O, F>(self, n: usize, f: F) -> Vec<O>
    where
        O: Send,
        F: Fn(usize) -> O + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Rayon {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Runs `f` over fixed-size mutable chunks of `out`, passing each chunk's
    /// starting offset.
    pub fn for_each_chunk<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self == Exec::Rayon {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i * chunk, c));
            return;
        }
        out.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i * chunk, c));
    }
}

/// Caps the global worker pool from the `BODEB_THREADS` environment variable.
/// Returns the configured cap, if any. Calling it more than once is harmless.
pub fn init_thread_pool_from_env() -> Option<usize> {
    let threads = std::env::var("BODEB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)?;
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Some(threads)
}
