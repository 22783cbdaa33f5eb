//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split into the same fixed-size chunks and results come back
//! in chunk order, so reductions over the returned vector are bit-identical
//! whichever mode runs them. Without the `parallel` feature, `Parallel`
//! silently runs sequentially.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl ExecMode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Splits `0..len` into consecutive ranges of at most `chunk` elements.
pub fn chunk_ranges(len: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..len)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(len))
        .collect()
}

/// Applies `f` to each chunk range of `0..len`, returning results in order.
pub fn map_ranges<R, F>(mode: ExecMode, len: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(Range<usize>) -> R + Sync + Send,
{
    let ranges = chunk_ranges(len, chunk);
    #[cfg(feature = "parallel")]
    if mode.is_parallel() && ranges.len() > 1 {
        return ranges.into_par_iter().map(f).collect();
    }
    let _ = mode;
    ranges.into_iter().map(f).collect()
}

/// Applies `f` to every item, preserving order.
pub fn map_items<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() && items.len() > 1 {
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_everything_once() {
        let r = chunk_ranges(10, 3);
        assert_eq!(r, vec![0..3, 3..6, 6..9, 9..10]);
        assert!(chunk_ranges(0, 4).is_empty());
    }

    #[test]
    fn modes_agree() {
        let seq = map_ranges(ExecMode::Sequential, 1000, 7, |r| r.map(|i| i as f64 * 0.1).sum::<f64>());
        let par = map_ranges(ExecMode::Parallel, 1000, 7, |r| r.map(|i| i as f64 * 0.1).sum::<f64>());
        assert_eq!(seq, par);
    }
}
