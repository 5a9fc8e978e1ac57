//! Order-preserving data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) the hot loops fan out over
//! rayon; without it they run sequentially with identical results.
//! Every call site relies on the output order matching the input order,
//! which both paths guarantee.

#[cfg(feature = "parallel")]
pub(crate) fn map_ordered<T, O, F>(items: &[T], f: F) -> Vec<O>
where
    T: Sync,
    O: Send,
    F: Fn(&T) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_ordered<T, O, F>(items: &[T], f: F) -> Vec<O>
where
    F: Fn(&T) -> O,
{
    items.iter().map(f).collect()
}

/// Always-sequential twin of [`map_ordered`], kept around so the bench
/// suite can compare both paths inside one build.
pub fn seq_map_support<T, O, F>(items: &[T], f: F) -> Vec<O>
where
    F: Fn(&T) -> O,
{
    items.iter().map(f).collect()
}
