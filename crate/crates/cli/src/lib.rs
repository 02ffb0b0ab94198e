//! Experiment shell for the gist-compression crate: synthetic data
//! generation, training orchestration with bit-exact checkpoint/resume,
//! and evaluation report writers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod report;
pub mod runner;

/// FNV-1a 64-bit hash, used for config and checkpoint content hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn hash_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}
