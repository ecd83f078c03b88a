//! Seed discipline.
//!
//! A run has one root seed. Each trajectory gets its own seed derived from
//! `(root, trajectory index)`, and inside a decode every role (a model id, or
//! the acceptance coin) gets an independent stream derived from
//! `(trajectory seed, role label)`. Results therefore never depend on worker
//! scheduling, and a model samples identically whether it runs alone or
//! inside an RSD loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DecodeRng = ChaCha8Rng;

/// Label of the stream used for acceptance draws.
pub const ACCEPT_STREAM: &str = "accept";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for trajectory `index` of a run.
pub fn trajectory_seed(root: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Independent stream for `label` within a trajectory.
pub fn stream(seed: u64, label: &str) -> DecodeRng {
    DecodeRng::seed_from_u64(splitmix64(seed ^ fnv1a(label.as_bytes())))
}
