//! Seeded random streams. Every generator in the crate is a ChaCha stream
//! derived from an explicit `u64` seed, so runs are bitwise reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-item seed used when work is split across images.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index
}

/// SplitMix64 finalizer. Spreads nearby seeds far apart so that
/// `derive_seed(mix_seed(a), i)` streams for different `a` never coincide.
pub fn mix_seed(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Source of standard-normal vectors consumed by the sampler.
///
/// The sampler only ever asks for whole vectors, in a fixed order, which lets
/// tests substitute deterministic streams (e.g. all zeros).
pub trait NoiseSource {
    fn standard_normal(&mut self, n: usize) -> Vec<f64>;
}

impl NoiseSource for ChaCha8Rng {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        normal_vec(self, n)
    }
}

/// Noise source that always yields zeros.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        vec![0.0; n]
    }
}
