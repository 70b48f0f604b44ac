//! Deterministic RNG substreams.
//!
//! A single experiment seed fans out into independent named streams
//! (corpus synthesis, partitioning, client sampling, parameter init,
//! per-client batch order) so that changing how one stage consumes
//! randomness never perturbs another stage.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MIX: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(MIX);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a ChaCha stream from `(seed, domain, counters)`. The same inputs
/// always yield the same stream; distinct domains or counters yield
/// statistically independent streams.
pub fn substream(seed: u64, domain: &str, counters: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(domain.as_bytes()).rotate_left(17);
    let mut absorb = splitmix64(&mut state);
    for &c in counters {
        state ^= c.wrapping_mul(MIX).rotate_left(23);
        absorb ^= splitmix64(&mut state);
    }
    state ^= absorb;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal draw via Box-Muller on the given stream.
pub fn gaussian(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
