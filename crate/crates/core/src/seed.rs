//! Stable hashing and seed derivation.
//!
//! Every seed used by a stage is derived from the run seed, the stage name
//! and a cell identifier, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// SHA-256 over the parts, separated by a unit separator byte.
pub fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

pub fn hash64(parts: &[&[u8]]) -> u64 {
    let d = digest(parts);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Short hex id (16 hex chars) over string parts.
pub fn short_id(parts: &[&str]) -> String {
    let bytes: Vec<&[u8]> = parts.iter().map(|p| p.as_bytes()).collect();
    hex::encode(&digest(&bytes)[..8])
}

/// hash(run seed, stage name, cell id)
pub fn derive_seed(run_seed: u64, stage: &str, cell: &str) -> u64 {
    hash64(&[&run_seed.to_le_bytes(), stage.as_bytes(), cell.as_bytes()])
}

/// Seed for the `index`-th repetition of a seeded procedure.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    hash64(&[&seed.to_le_bytes(), &index.to_le_bytes()])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
