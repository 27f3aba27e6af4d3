//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it, or with [`Execution::Sequential`], everything runs in order on
//! the calling thread. Callers only hand in closures whose results do not
//! depend on scheduling, so both paths return identical values.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Execution {
    Sequential,
    /// `threads == 0` uses rayon's global pool.
    Parallel {
        threads: usize,
    },
    #[default]
    Auto,
}

impl Execution {
    /// From a worker count: 1 is sequential, 0 lets rayon decide.
    pub fn from_workers(workers: usize) -> Self {
        match workers {
            1 => Execution::Sequential,
            0 => Execution::Auto,
            n => Execution::Parallel { threads: n },
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self != Execution::Sequential
    }
}

/// Maps `f` over `items` mutably, preserving order.
pub fn map_mut<T, U, F>(items: &mut [T], exec: Execution, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(&mut T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match exec {
            Execution::Sequential => items.iter_mut().map(f).collect(),
            Execution::Auto | Execution::Parallel { threads: 0 } => {
                items.par_iter_mut().map(f).collect()
            }
            Execution::Parallel { threads } => {
                with_pool(threads, || items.par_iter_mut().map(f).collect())
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = exec;
        items.iter_mut().map(f).collect()
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], exec: Execution, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        match exec {
            Execution::Sequential => items.iter().map(f).collect(),
            Execution::Auto | Execution::Parallel { threads: 0 } => {
                items.par_iter().map(f).collect()
            }
            Execution::Parallel { threads } => {
                with_pool(threads, || items.par_iter().map(f).collect())
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = exec;
        items.iter().map(f).collect()
    }
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(threads: usize, op: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(op),
        // Pool creation only fails on resource exhaustion; fall back to the
        // global pool, which gives the same results.
        Err(_) => op(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_modes_agree() {
        let xs: Vec<u64> = (0..100).collect();
        let expect: Vec<u64> = xs.iter().map(|x| x * x).collect();
        for exec in [
            Execution::Sequential,
            Execution::Auto,
            Execution::Parallel { threads: 3 },
        ] {
            assert_eq!(map(&xs, exec, |x| x * x), expect);
            let mut ys = xs.clone();
            assert_eq!(
                map_mut(&mut ys, exec, |x| {
                    *x += 1;
                    *x
                }),
                (1..101).collect::<Vec<u64>>()
            );
        }
    }

    #[test]
    fn worker_counts() {
        assert_eq!(Execution::from_workers(1), Execution::Sequential);
        assert_eq!(Execution::from_workers(0), Execution::Auto);
        assert_eq!(
            Execution::from_workers(4),
            Execution::Parallel { threads: 4 }
        );
    }
}
