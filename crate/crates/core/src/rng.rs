//! Named, counter-derived random substreams.
//!
//! All randomness flows from one master seed. A substream is identified by
//! a name (`"data"`, `"init"`, `"sampler"`, ...) and an index, and is
//! seeded by hashing those together with the master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes, used to fold names and ids into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut s = splitmix64(seed ^ fnv1a(name.as_bytes()));
    s = splitmix64(s ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    s
}

pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, index))
}
