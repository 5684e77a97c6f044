//! Deterministic parallel reductions.
//!
//! Work is split into chunks whose boundaries depend only on the item count,
//! never on the thread count, and partial results are merged in chunk order.
//! Serial and parallel runs therefore produce bit-identical sums.

use rayon::prelude::*;

/// Chunk length used for `n` items.
pub fn chunk_len(n: usize) -> usize {
    (n / 16).max(256)
}

/// Folds items `0..n` into per-chunk accumulators in parallel and merges the
/// accumulators left to right.
pub fn chunked_reduce<A, I, F, M>(n: usize, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
    M: Fn(&mut A, A),
{
    let len = chunk_len(n);
    let n_chunks = n.div_ceil(len).max(1);
    let parts: Vec<A> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in (c * len)..((c + 1) * len).min(n) {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut iter = parts.into_iter();
    let mut out = iter.next().expect("at least one chunk");
    for p in iter {
        merge(&mut out, p);
    }
    out
}

/// Fixed-order sum of a slice.
pub fn sum(values: &[f64]) -> f64 {
    chunked_reduce(
        values.len(),
        || 0.0,
        |acc, i| *acc += values[i],
        |acc, other| *acc += other,
    )
}

/// Element-wise `dst += src`.
pub fn add_assign<T: Copy + std::ops::AddAssign>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
