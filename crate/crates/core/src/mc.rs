//! Seeded, chunked Monte-Carlo execution.
//!
//! Every estimator splits its sample budget into fixed-size chunks. Chunk `k`
//! draws from its own ChaCha stream `k` of the caller's seed, so the random
//! numbers a chunk sees do not depend on which thread runs it. Chunk results
//! are collected in index order and reduced sequentially, which makes the
//! parallel and sequential paths bit-identical.
//!
//! With the `parallel` feature (default) chunks run on the rayon pool. The
//! sequential path is always compiled and can be forced at runtime with
//! [`set_execution`], which is how the benches compare the two.

use std::sync::atomic::{AtomicU8, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type McRng = ChaCha8Rng;

/// Default number of draws per chunk.
pub const CHUNK: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Parallel,
    Sequential,
}

static EXECUTION: AtomicU8 = AtomicU8::new(0);

/// Selects how chunked work is scheduled for the whole process.
/// `Parallel` silently degrades to sequential without the `parallel` feature.
pub fn set_execution(mode: Execution) {
    let v = match mode {
        Execution::Parallel => 0,
        Execution::Sequential => 1,
    };
    EXECUTION.store(v, Ordering::SeqCst);
}

pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && EXECUTION.load(Ordering::SeqCst) == 0 {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// SplitMix64 finalizer; used to derive independent seeds from (seed, salt).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The random stream for chunk `stream` of an experiment seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> McRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Maps `f` over `0..n`, results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Sizes of the chunks covering `total` draws.
pub fn chunk_sizes(total: usize, chunk: usize) -> Vec<usize> {
    assert!(chunk > 0);
    let full = total / chunk;
    let mut sizes = vec![chunk; full];
    if !total.is_multiple_of(chunk) {
        sizes.push(total % chunk);
    }
    sizes
}

/// Runs `f(rng, count)` once per chunk of `total` draws, each chunk on its own
/// stream of `seed`. Results are returned in chunk order.
pub fn map_chunks<T, F>(seed: u64, total: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut McRng, usize) -> T + Sync + Send,
{
    let sizes = chunk_sizes(total, chunk);
    map_indexed(sizes.len(), |k| {
        let mut rng = stream_rng(seed, k as u64);
        f(&mut rng, sizes[k])
    })
}

/// Mergeable partial result of a chunked estimator.
pub trait Merge {
    fn merge(&mut self, other: Self);
}

/// [`map_chunks`] followed by an in-order merge.
pub fn reduce_chunks<T, F>(seed: u64, total: usize, chunk: usize, f: F) -> Option<T>
where
    T: Send + Merge,
    F: Fn(&mut McRng, usize) -> T + Sync + Send,
{
    let mut parts = map_chunks(seed, total, chunk, f).into_iter();
    let mut acc = parts.next()?;
    for p in parts {
        acc.merge(p);
    }
    Some(acc)
}
