//! Ordered data-parallel helpers.
//!
//! With the `parallel` feature (default) batch maps run on rayon; without it
//! they fall back to plain sequential loops. Results are always collected in
//! input order, so both paths produce identical output, bit for bit, for
//! deterministic per-item work.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential reference path for [`map_ordered`]; used by benchmarks to
/// compare against the rayon path within a single build.
pub fn map_ordered_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Run `f` inside a thread pool capped at `workers` threads.
///
/// `None` (or a sequential build) runs `f` on the global pool / current
/// thread. A cap of zero is treated as one.
pub fn run_with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match workers {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .expect("thread pool construction");
                pool.install(f)
            }
            None => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}
