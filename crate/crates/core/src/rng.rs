//! Seeded randomness. Every random draw in the crate goes through [`Rng`],
//! and independent purposes get their own stream derived from one master seed.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

/// Mixes a master seed with a purpose label into an independent sub-seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = splitmix64(master ^ 0x5245_4647_414d_4531);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

pub fn stream(master: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, label))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
