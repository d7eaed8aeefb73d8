//! Run manifests: enough resolved state to replay a run byte-for-byte.

use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

/// FNV-1a 64-bit content hash, hex-encoded. Stable and dependency-free;
/// used to fingerprint input artifacts, not for security.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(fnv1a_hex(&std::fs::read(path)?))
}

#[derive(Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// FNV-1a hashes of input artifacts (config file, checkpoints).
    pub artifact_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            artifact_hashes: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.inputs.insert(key.to_string(), value.into());
        self
    }

    pub fn output(&mut self, value: impl Into<String>) -> &mut Self {
        self.outputs.push(value.into());
        self
    }

    pub fn hash_artifact(&mut self, key: &str, path: &Path) -> std::io::Result<&mut Self> {
        self.artifact_hashes
            .insert(key.to_string(), hash_file(path)?);
        Ok(self)
    }

    /// Write the manifest into the run directory before work starts.
    pub fn write(&self, out_dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_known_vectors() {
        assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
        assert_eq!(fnv1a_hex(b"a"), "af63dc4c8601ec8c");
    }
}
