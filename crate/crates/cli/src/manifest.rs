use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Run record written next to the outputs. Contains no timestamps so that
/// identical runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_sha256: Option<String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn write(mut self, out: &Path, files: &[PathBuf]) -> CliResult<()> {
        for f in files {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            self.outputs.insert(name, file_sha256(f)?);
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        std::fs::write(out.join("manifest.json"), text)?;
        Ok(())
    }
}
