//! Data-parallel map helpers.
//!
//! Hot loops (per-record gradients, batch prediction, per-student
//! response sampling) are expressed as order-preserving maps so the
//! parallel and sequential paths produce bit-identical results. The
//! `parallel` feature selects the default; the sequential path is always
//! available, which is what the benches compare against.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_seq<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_par<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.par_iter().map(f).collect()
}

/// Map over a slice with the best available strategy.
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        map_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

pub fn map_indices_seq<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indices_par<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

/// Index-driven variant of [`map`].
pub fn map_indices<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        map_indices_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indices_seq(n, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<usize> = (0..1000).collect();
        let out = map(&items, |&i| i * 2);
        assert_eq!(out, map_seq(&items, |&i| i * 2));
    }
}
