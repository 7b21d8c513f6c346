//! Desk-scale laboratory for emergent-communication localization on
//! landmarked grids.
//!
//! A tourist walks a small landmark grid and compresses its trajectory into
//! a message (a continuous vector or sampled bits); a guide grounds the
//! message on the overhead map with action-masked spatial convolutions and
//! predicts the tourist's location. The crate provides the environments,
//! a minimal reverse-mode differentiation engine, both agents, an exact
//! Bayes-accuracy oracle, training loops, and the random-walk full-task
//! protocol.

pub mod config;
pub mod diffcore;
pub mod gridworld;
pub mod guide;
pub mod localizer;
pub mod oracle;
pub mod protocol;
pub mod report;
pub mod tourist;
pub mod trainer;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Derives an independent per-purpose seed from one master seed, so every
/// rng stream in a pipeline is pinned by a single number.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8+ bytes"))
}
