//! Configuration, checkpoints, reports and the experiment commands behind the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointKind, RngState};
pub use config::{EvalOptions, PretrainOptions, TrainConfig};
pub use report::{HistoryRow, RunReport, RunResult};

/// First 16 hex digits of the SHA-256 of the compact JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes to JSON");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_discriminating() {
        let a = hash_json(&[1, 2, 3]);
        assert_eq!(a, hash_json(&[1, 2, 3]));
        assert_eq!(a.len(), 16);
        assert_ne!(a, hash_json(&[1, 2, 4]));
    }
}
