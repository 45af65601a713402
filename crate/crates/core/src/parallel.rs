//! Deterministic parallel reductions.
//!
//! Work is split into fixed-size chunks whose boundaries do not depend on the
//! number of worker threads; partial results are merged serially in chunk
//! order. Results are therefore bitwise identical for any pool size.

use rayon::prelude::*;

/// Chunk length for pixel-domain reductions.
pub const CHUNK: usize = 256;

/// Map every index in `0..n` to an optional contribution, in parallel, and
/// return the contributions in index order.
pub fn ordered_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Sum per-chunk accumulators of length `len` built by `fill`, merging them in
/// chunk order.
pub fn chunked_sum<F>(n: usize, len: usize, fill: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            let lo = c * CHUNK;
            fill(lo..(lo + CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Serial left-to-right sum, for use after an ordered parallel map.
pub fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |a, &b| a + b)
}
