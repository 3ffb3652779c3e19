//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it, or with [`Execution::Sequential`], the same closures run on
//! the calling thread. Results always come back in input order, so callers
//! that reduce them sequentially get bit-identical sums either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a batch of independent work items is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Falls back to sequential execution when built without `parallel`.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..len`, preserving order.
pub fn map_range<R, F>(exec: Execution, len: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

pub fn current_num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = map(Execution::Sequential, &items, |x| x * x);
        let par = map(Execution::Parallel, &items, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(map_range(Execution::Parallel, 5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
