//! Execution strategy for data-parallel inner loops.
//!
//! With the `parallel` feature (default) the helpers fan work out over rayon;
//! without it they run sequentially. Work is always split at fixed,
//! thread-count-independent boundaries and recombined in index order, so both
//! paths — and any number of worker threads — produce bit-identical results.
//!
//! [`sequential_scope`] forces the sequential path at runtime regardless of
//! features; the benches use it to compare both paths in a single build.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with all `exec` helpers on this thread forced to the sequential path.
pub fn sequential_scope<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQUENTIAL.with(|flag| {
        let prev = flag.get();
        flag.set(true);
        let out = f();
        flag.set(prev);
        out
    })
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(Cell::get)
}

/// Map over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] for fallible work; fails on the first error in index order.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> std::result::Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> std::result::Result<T, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to disjoint chunks of `data` of fixed size `chunk`.
/// The second argument is the element offset of the chunk.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(&mut [T], usize) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(c, i * chunk));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(c, i * chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_scope_restores_flag() {
        assert!(parallel_enabled() == cfg!(feature = "parallel"));
        sequential_scope(|| {
            assert!(!parallel_enabled());
        });
        assert!(parallel_enabled() == cfg!(feature = "parallel"));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let par = map_indexed(64, |i| (i as f64).sqrt().sin());
        let seq = sequential_scope(|| map_indexed(64, |i| (i as f64).sqrt().sin()));
        assert_eq!(par, seq);
    }
}
