//! Execution policy for the data-parallel loops in this crate.
//!
//! Every batch operation (per-image aggregation, similarity rows, index
//! scans) takes an [`Execution`]. With the `parallel` feature enabled,
//! [`Execution::Parallel`] dispatches onto the current rayon pool; without
//! it, both variants run sequentially and produce identical output.

/// How a batch loop is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Plain iterator on the calling thread.
    Sequential,
    /// Rayon work-stealing pool (falls back to sequential without the
    /// `parallel` feature).
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this policy will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Maps `f` over `0..len`, preserving index order in the output.
    pub fn map_range<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
        (0..len).map(f).collect()
    }

    /// Maps `f` over a slice, preserving order.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Applies `f` to consecutive mutable chunks of `data`, passing the
    /// chunk index.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_policies_agree() {
        let seq = Execution::Sequential.map_range(100, |i| i * i);
        let par = Execution::Parallel.map_range(100, |i| i * i);
        assert_eq!(seq, par);

        let mut a = vec![0usize; 37];
        let mut b = vec![0usize; 37];
        Execution::Sequential.for_each_chunk_mut(&mut a, 5, |ci, c| {
            c.iter_mut().enumerate().for_each(|(j, x)| *x = ci * 5 + j)
        });
        Execution::Parallel.for_each_chunk_mut(&mut b, 5, |ci, c| {
            c.iter_mut().enumerate().for_each(|(j, x)| *x = ci * 5 + j)
        });
        assert_eq!(a, b);
        assert_eq!(a, (0..37).collect::<Vec<_>>());
    }
}
