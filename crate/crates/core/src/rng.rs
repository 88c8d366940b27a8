//! Seeded noise streams and the deterministic sample-parallel map.
//!
//! Sample `m` of a Monte-Carlo loop always draws from stream `m` of a ChaCha8
//! generator keyed by the run seed, so its value does not depend on which
//! worker evaluates it. Results come back in index order and every reduction
//! folds them sequentially, which keeps sums bit-stable across thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Generator for the `index`-th substream of `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// The standard-normal draw used for sample `index` of a seeded loop.
pub fn normal_draw(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    standard_normal(&mut substream(seed, index), dim)
}

/// A child seed for `(seed, tag)`, e.g. one noise stream per optimization step.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed
        ^ tag
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// How the per-sample work of a Monte-Carlo loop is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

/// `(0..n).map(f)` collected in index order, run according to `exec`.
pub fn map_indexed<T, F>(n: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n as u64).map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n as u64).into_par_iter().map(f).collect()
        }
    }
}
