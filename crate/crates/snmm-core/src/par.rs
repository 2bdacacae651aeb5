//! Deterministic data-parallel helpers.
//!
//! All parallel entry points in this crate go through these functions so that
//! results are bit-identical regardless of worker count: work is split into
//! fixed, index-ordered units and combined in index order. With the `parallel`
//! feature disabled everything runs sequentially on the calling thread.

/// Runs `f` inside a thread pool with the requested number of workers.
///
/// `workers = None` uses the default pool size; `Some(1)` is effectively
/// sequential. Without the `parallel` feature the worker count is ignored.
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("failed to build thread pool")
            .install(f),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R: Send>(_workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Chunk size used for deterministic parallel reductions. Fixed so that the
/// chunk boundaries, and therefore the floating-point summation order, do not
/// depend on the worker count.
pub const REDUCE_CHUNK: usize = 256;

/// Computes `make(range)` over fixed-size chunks of `0..n` (possibly in
/// parallel) and folds the chunk results in chunk order.
pub fn reduce_chunked<S, F>(n: usize, make: F, combine: impl Fn(S, S) -> S) -> Option<S>
where
    S: Send,
    F: Fn(std::ops::Range<usize>) -> S + Sync + Send,
{
    if n == 0 {
        return None;
    }
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(n_chunks, |c| {
        let lo = c * REDUCE_CHUNK;
        make(lo..(lo + REDUCE_CHUNK).min(n))
    });
    partials.into_iter().reduce(combine)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * 2));
    }

    #[test]
    fn reduce_chunked_matches_sequential_sum() {
        let n = 10_000;
        let seq: f64 = (0..n).map(|i| (i as f64).sqrt()).sum();
        let par = reduce_chunked(
            n,
            |r| r.map(|i| (i as f64).sqrt()).sum::<f64>(),
            |a, b| a + b,
        )
        .unwrap();
        // Same chunking either way, so only association inside a chunk matters.
        assert!((seq - par).abs() < 1e-9 * seq.abs());
    }

    #[test]
    fn reduce_chunked_empty() {
        assert!(reduce_chunked(0, |_| 0.0f64, |a, b| a + b).is_none());
    }
}
