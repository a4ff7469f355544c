//! Deterministic data-parallel helpers.
//!
//! Reductions split the index range into fixed-size chunks and combine the
//! partial results in chunk order, so the result does not depend on the
//! number of worker threads.

use std::ops::Range;

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 4096;

pub(crate) fn chunk_ranges(len: usize, chunk: usize) -> impl IndexedParallelIterator<Item = Range<usize>> {
    let n = len.div_ceil(chunk);
    (0..n).into_par_iter().map(move |c| c * chunk..((c + 1) * chunk).min(len))
}

/// Ordered reduction of per-chunk partial values.
pub(crate) fn reduce_chunks<R, F, G>(len: usize, chunk: usize, partial: F, mut combine: G, init: R) -> R
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
    G: FnMut(R, R) -> R,
{
    let parts: Vec<R> = chunk_ranges(len, chunk).map(partial).collect();
    parts.into_iter().fold(init, &mut combine)
}

/// `(0..len).map(f)` evaluated in parallel.
pub(crate) fn map_indices<R: Send, F: Fn(usize) -> R + Sync + Send>(len: usize, f: F) -> Vec<R> {
    (0..len).into_par_iter().map(f).collect()
}

/// Like [`map_indices`] for array-valued `f`, returning one vector per lane.
pub(crate) fn map_indices_split<T, F, const N: usize>(len: usize, f: F) -> [Vec<T>; N]
where
    T: Copy + Default + Send + Sync,
    F: Fn(usize) -> [T; N] + Sync + Send,
{
    let mut out: [Vec<T>; N] = std::array::from_fn(|_| vec![T::default(); len]);
    let mut lanes: Vec<_> = out.iter_mut().map(|v| v.chunks_mut(CHUNK)).collect();
    let chunks: Vec<Vec<&mut [T]>> =
        (0..len.div_ceil(CHUNK)).map(|_| lanes.iter_mut().map(|l| l.next().expect("equal lengths")).collect()).collect();
    chunks.into_par_iter().enumerate().for_each(|(c, mut slices)| {
        for o in 0..slices[0].len() {
            for (s, v) in slices.iter_mut().zip(f(c * CHUNK + o)) {
                s[o] = v;
            }
        }
    });
    drop(lanes);
    out
}
