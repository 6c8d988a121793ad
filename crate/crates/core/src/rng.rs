//! Seed plumbing. Every random stream is derived from the run seed plus a purpose
//! tag, so adding a consumer never shifts the draws of another.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Purpose tags for derived streams.
pub mod tag {
    pub const SPLIT: u64 = 0x5350_4c49;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const SWEEP: u64 = 0x5357_4550;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(tag)) ^ index)
}
