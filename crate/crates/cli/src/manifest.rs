use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Exit status of one run inside a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub seed: u64,
    pub exit_code: i32,
}

/// `manifest.json`: the only output that carries timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// SHA-256 of the constraint (or suite) file, when one was given.
    pub input_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub runs: Vec<RunStatus>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, input: Option<&[u8]>) -> Self {
        Self {
            command: command.to_string(),
            config,
            input_hash: input.map(sha256_hex),
            seeds: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: String::new(),
            runs: Vec::new(),
        }
    }

    /// Stamps the end time and writes `manifest.json` via a rename so readers
    /// never see a partial file.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<()> {
        self.finished_at = now();
        let tmp = dir.join(".manifest.json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
            f.write_all(text.as_bytes())?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, dir.join("manifest.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn written_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("validate", serde_json::json!({}), Some(b"abc"));
        m.finish(dir.path()).unwrap();
        let back: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(back.input_hash.as_deref().map(|h| &h[..8]), Some("ba7816bf"));
        assert!(!dir.path().join(".manifest.json.tmp").exists());
        assert!(!back.finished_at.is_empty());
    }
}
