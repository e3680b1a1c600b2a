//! Thin switch between rayon and sequential execution.
//!
//! With the `parallel` feature the helpers run on a rayon pool sized by the
//! caller; without it they fall back to plain iterators. Results are always
//! collected in input order, so both paths produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n` using up to `workers` threads, preserving order.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if workers > 1 && n > 1 {
            return with_pool(workers, || (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    (0..n).map(f).collect()
}

/// Runs `op` on a dedicated pool of `workers` threads.
#[cfg(feature = "parallel")]
pub fn with_pool<R: Send>(workers: usize, op: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(op),
        Err(err) => {
            log::warn!("falling back to the global pool: {err}");
            op()
        }
    }
}

/// Whether the crate was built with rayon support.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
