//! Sub-seed derivation: every random stream is keyed by
//! `sha256(seed ‖ stage ‖ index)` so runs are reproducible from one seed.

use sha2::{Digest, Sha256};

pub fn derive(seed: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
