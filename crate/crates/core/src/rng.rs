//! Named random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Stream `name` of run `seed`, further split by `index`.
pub fn stream(seed: u64, name: &str, index: u64) -> Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix(seed) ^ fnv1a(name);
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        state = splitmix(state ^ index.wrapping_mul(0xA24B_AED4_963E_E407).wrapping_add(i as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    Rng::from_seed(key)
}
