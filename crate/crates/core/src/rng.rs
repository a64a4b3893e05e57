//! Seeded random streams and the hierarchical split used everywhere.
//!
//! A stream is a ChaCha8 generator. Child seeds are derived from a parent seed
//! and an index through two rounds of the SplitMix64 finalizer, so
//! `derive(root, &[cell, seed, worker])` names a unique, reproducible stream.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed number `index` of `parent`.
pub fn split(parent: u64, index: u64) -> u64 {
    mix(parent.wrapping_add(GOLDEN) ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Seed reached by walking `path` down from `root`.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(root, |s, &i| split(s, i))
}

pub fn stream(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}

pub fn derive(root: u64, path: &[u64]) -> Stream {
    stream(derive_seed(root, path))
}

/// Fresh independent stream seeded from the next word of `rng`.
pub fn fork(rng: &mut Stream) -> Stream {
    stream(mix(rng.next_u64()))
}
