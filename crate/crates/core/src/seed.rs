//! Deterministic seed derivation.
//!
//! All randomness in an experiment flows from one root seed. Components
//! (workload generator, simulator replicas, inference sampler, ...) derive
//! child seeds from the root by name, so adding a component never perturbs
//! the stream of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the component name, then splitmix64 to decorrelate from the root.
pub fn child_seed(root: u64, component: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in component.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ h)
}

/// Seeded generator for a named component.
pub fn rng_for(root: u64, component: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(child_seed(root, component))
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
