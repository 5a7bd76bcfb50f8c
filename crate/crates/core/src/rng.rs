//! Deterministic random-stream derivation.
//!
//! Every stochastic task gets its own ChaCha stream whose seed is a pure
//! function of the root seed, a purpose tag, and up to two counters. Two
//! tasks never share a stream, and adding new tasks (for instance another
//! re-noising time to a sweep) never changes the stream of an existing one.
//!
//! Rule: `seed = mix(mix(mix(root ^ tag) ^ a) ^ b)` where `mix` is the
//! SplitMix64 finalizer; the stream is `ChaCha12Rng::seed_from_u64(seed)`.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

/// Tags separating the purposes a stream can be drawn for.
pub mod tag {
    pub const DATA: u64 = 0x6461_7461;
    pub const STAGE1: u64 = 0x7374_6731;
    pub const STAGE2: u64 = 0x7374_6732;
    pub const REFERENCE: u64 = 0x7265_6665;
    pub const OPERATOR: u64 = 0x6f70_6572;
    pub const CODEC: u64 = 0x636f_6465;
    pub const ORACLE: u64 = 0x6f72_6163;
    pub const CHECK: u64 = 0x6368_6563;
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, tag: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(root ^ tag) ^ a) ^ b)
}

pub fn stream(root: u64, tag: u64, a: u64, b: u64) -> Stream {
    Stream::seed_from_u64(derive_seed(root, tag, a, b))
}
