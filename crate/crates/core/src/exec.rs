//! Thread policy and deterministic RNG streams.
//!
//! Models call [`par_map`] for work that may run on several threads. With
//! the default of one thread the closure runs sequentially on the caller, and
//! [`parallel_dispatches`] stays unchanged so callers can audit that no
//! worker parallelism happened.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

static THREADS: AtomicUsize = AtomicUsize::new(1);
static PARALLEL_DISPATCHES: AtomicU64 = AtomicU64::new(0);

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// Number of times work was handed to the rayon pool.
pub fn parallel_dispatches() -> u64 {
    PARALLEL_DISPATCHES.load(Ordering::SeqCst)
}

pub fn par_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if threads() <= 1 || items.len() <= 1 {
        items.into_iter().map(f).collect()
    } else {
        PARALLEL_DISPATCHES.fetch_add(1, Ordering::SeqCst);
        items.into_par_iter().map(f).collect()
    }
}

/// Independent RNG for `stream` under a root `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a root seed with a label into a new seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
