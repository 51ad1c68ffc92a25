//! Deterministic chunked map over index ranges.
//!
//! Work is split into fixed-size chunks whose results are returned in chunk
//! order, so floating-point reductions performed by the caller are identical
//! with and without the `parallel` feature and for any thread count.

use std::ops::Range;

/// Rows per chunk for per-sample hot loops.
pub const CHUNK: usize = 2048;

pub fn map_chunks<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = len.div_ceil(chunk);
    let range = move |c: usize| c * chunk..((c + 1) * chunk).min(len);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(|c| f(range(c))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_chunks).map(|c| f(range(c))).collect()
    }
}

/// Parallel map over `0..len`, results in index order.
pub fn map_indices<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}
