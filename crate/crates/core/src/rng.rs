//! Counter-based random streams.
//!
//! Every stochastic draw in the crate comes from a ChaCha stream keyed by
//! `(seed, purpose, index)`. Streams are independent of call order and of
//! how work is split between threads, so a run is reproduced exactly by its
//! seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. The discriminant is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    InitialNoise = 1,
    StepNoise = 2,
    Corrector = 3,
    TrainBatch = 4,
    ParamInit = 5,
    Data = 6,
    Loss = 7,
    Probe = 8,
    Split = 9,
    Oracle = 10,
}

const INDEX_BITS: u32 = 56;

/// Returns the stream for `(seed, purpose, index)`. `index` must fit in 56 bits.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    debug_assert!(index < (1 << INDEX_BITS));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << INDEX_BITS) | (index & ((1 << INDEX_BITS) - 1)));
    rng
}

/// Packs a two-level index (e.g. diffusion step and corrector iteration).
pub fn index2(outer: u64, inner: u64) -> u64 {
    debug_assert!(inner < (1 << 24) && outer < (1 << 32));
    (outer << 24) | inner
}

/// Derives a child seed; used to give each benchmark row or corpus its own
/// seed space from one global seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

pub fn normal_vec_f32(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}

pub fn normal_vec_f64(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
