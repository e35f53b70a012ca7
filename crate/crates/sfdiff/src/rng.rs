//! Deterministic RNG substreams.
//!
//! Every random decision in the pipeline draws from a `ChaCha8Rng` keyed by
//! (global seed, domain, index) through a SplitMix64 mixing chain. Streams
//! are therefore independent of iteration order and of each other: sample
//! 17 of a corpus build always sees the same stream no matter how many
//! threads produced samples 0..16.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. The numeric values are part of the reproducibility
/// contract: changing them changes every derived artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Corpus generation, one stream per sample.
    CorpusSample = 1,
    /// Denoiser parameter initialization, one stream per model.
    ParamInit = 2,
    /// Training, one stream per optimizer step.
    TrainStep = 3,
    /// Reverse-process sampling, one stream per reconstructed slice.
    Reconstruct = 4,
    /// Observation mask layout, one stream per sample.
    Mask = 5,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive the substream generator for (seed, domain, index).
pub fn substream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut state = seed;
    let a = splitmix64(&mut state);
    state ^= (domain as u64).wrapping_mul(0xA24BAED4963EE407);
    let b = splitmix64(&mut state);
    state ^= index.wrapping_mul(0x9FB21C651E98DF25);
    let c = splitmix64(&mut state);
    let d = splitmix64(&mut state);
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
