//! Data-parallel helpers.
//!
//! Every helper splits work into chunks whose contents are computed by a
//! single sequential loop, so results never depend on the number of worker
//! threads. With the `parallel` feature disabled, or inside [`sequential`],
//! the same chunks run in order on the calling thread.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQ: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with all helpers in this module forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQ.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQ.with(|c| c.set(prev));
    out
}

#[cfg(feature = "parallel")]
fn go_parallel() -> bool {
    !FORCE_SEQ.with(|c| c.get()) && rayon::current_num_threads() > 1
}

/// Runs `f` inside a worker pool with `threads` workers (0 = library default).
///
/// `threads == 1` runs on the calling thread without a pool.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 1 {
        return sequential(f);
    }
    #[cfg(feature = "parallel")]
    {
        if threads > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(f);
            }
        }
    }
    f()
}

/// Number of workers the helpers will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if go_parallel() {
            return rayon::current_num_threads();
        }
    }
    1
}

/// Calls `f(index, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if go_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, preserving index order in the output.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if go_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
