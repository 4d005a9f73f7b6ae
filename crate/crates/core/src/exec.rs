//! Data-parallel helpers.
//!
//! Every parallel loop in the crate goes through these functions so results
//! do not depend on the thread count: work is split into fixed chunks, each
//! chunk is reduced independently and chunk results are combined in index
//! order. Without the `parallel` feature, [`Execution::Parallel`] runs the
//! same chunked loop on the calling thread.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed chunk length for reductions over samples.
pub const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when this build can actually run work on a thread pool.
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Evaluate `f(i)` for `i in 0..count`, returning results in index order.
pub fn map_indexed<T, F>(exec: Execution, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

/// Sum of `f(i)` over `i in 0..count` into a vector of length `dim`.
///
/// `f` accumulates into the provided buffer. The summation order is fixed
/// by [`CHUNK`], so sequential and parallel runs agree bitwise.
pub fn chunked_sum<F>(exec: Execution, count: usize, dim: usize, f: F) -> DVector<f64>
where
    F: Fn(usize, &mut DVector<f64>) + Sync + Send,
{
    let chunks = count.div_ceil(CHUNK);
    let partial = map_indexed(exec, chunks, |c| {
        let mut acc = DVector::zeros(dim);
        let end = ((c + 1) * CHUNK).min(count);
        for i in c * CHUNK..end {
            f(i, &mut acc);
        }
        acc
    });
    partial
        .into_iter()
        .fold(DVector::zeros(dim), |total, part| total + part)
}

/// Split one generator into `count` independent streams.
///
/// A base seed is drawn from `rng`; stream `i` is ChaCha8 on that seed
/// with stream id `i`. The parent advances by exactly one draw.
pub fn fork_streams<R: Rng + ?Sized>(rng: &mut R, count: usize) -> Vec<ChaCha8Rng> {
    let base: [u8; 32] = rng.random();
    (0..count)
        .map(|i| {
            let mut child = ChaCha8Rng::from_seed(base);
            child.set_stream(i as u64);
            child
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn sequential_and_parallel_sums_agree_bitwise() {
        let f = |i: usize, acc: &mut DVector<f64>| {
            acc[0] += (i as f64).sin() * 1e-3;
            acc[1] += 1.0 / (1.0 + i as f64);
        };
        let a = chunked_sum(Execution::Sequential, 10_007, 2, f);
        let b = chunked_sum(Execution::Parallel, 10_007, 2, f);
        assert_eq!(a, b);
    }

    #[test]
    fn map_preserves_order() {
        let v = map_indexed(Execution::Parallel, 1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn forked_streams_are_reproducible_and_distinct() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let mut sa = fork_streams(&mut a, 3);
        let mut sb = fork_streams(&mut b, 3);
        let xa: Vec<u64> = sa.iter_mut().map(|r| r.next_u64()).collect();
        let xb: Vec<u64> = sb.iter_mut().map(|r| r.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa[0], xa[1]);
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
