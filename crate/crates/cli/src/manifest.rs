//! Run manifests: enough to repeat a run and check its input.

use std::path::Path;

use sepdl_core::data::encode_patchset;
use sepdl_core::PatchSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: C,
    /// SHA-256 of the encoded training patches.
    pub dataset_sha256: Option<String>,
    pub artifacts: Vec<String>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &str, seed: u64, config: C) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            dataset_sha256: None,
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

pub fn fingerprint(set: &PatchSet) -> String {
    let digest = Sha256::digest(encode_patchset(set));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<Manifest<C>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("malformed manifest {}: {e}", path.display())))
}
