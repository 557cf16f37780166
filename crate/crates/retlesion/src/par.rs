//! Data-parallel execution helpers.
//!
//! The hot loops (convolutions, batch evaluation, synthesis) run through the
//! two dispatchers below. With the `parallel` feature (default) they use
//! rayon; without it, or after `set_parallel(false)`, they run sequentially.
//! The runtime switch exists so benchmarks can compare both paths in one
//! process.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Toggle rayon execution at runtime. No-op (always sequential) when the
/// `parallel` feature is disabled.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Apply `f` to each `chunk`-sized window of `data`, passing the chunk index.
/// `data.len()` must be a multiple-or-remainder split; chunks are disjoint so
/// the parallel and sequential paths produce identical results.
pub fn for_each_chunk<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Fold `0..n` into mergeable partial accumulators. Partials are computed
/// over fixed index ranges and merged in index order, so the result is
/// independent of scheduling (bit-reproducible run to run).
pub fn fold_indexed<A, New, Step, Merge>(n: usize, new_acc: New, step: Step, merge: Merge) -> A
where
    A: Send,
    New: Fn() -> A + Sync + Send,
    Step: Fn(&mut A, usize) + Sync + Send,
    Merge: Fn(A, A) -> A + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        let chunks = n.min(64);
        let per = n.div_ceil(chunks);
        let partials: Vec<A> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut a = new_acc();
                for i in c * per..((c + 1) * per).min(n) {
                    step(&mut a, i);
                }
                a
            })
            .collect();
        return partials
            .into_iter()
            .reduce(&merge)
            .expect("at least one chunk");
    }
    let mut acc = new_acc();
    for i in 0..n {
        step(&mut acc, i);
    }
    acc
}

/// Map `0..n` to a vector, preserving order.
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
