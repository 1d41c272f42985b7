//! Data-parallel helpers with a sequential fallback.
//!
//! Everything routed through here must stay bitwise deterministic: each task
//! owns a disjoint output slot and performs its own reductions in a fixed
//! order, so the thread schedule cannot change any result.

/// True when the crate was built with the `parallel` feature.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, par: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if par && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Run `f` over mutable equal-length chunks of `data`, indexed in order.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, par: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert!(chunk > 0 && data.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        if par && data.len() / chunk > 1 {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = par;
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
