//! Reproducibility record written at the end of every run. The manifest
//! digest covers the input config byte-for-byte; overrides and resolved
//! seeds are recorded separately so a run can be replayed exactly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the raw config file bytes.
    pub config_digest: String,
    pub command: String,
    pub overrides: Vec<String>,
    pub resolved_seed: u64,
    pub module_versions: Vec<(String, String)>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub wall_seconds: f64,
    pub emitted_files: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(config_bytes: &[u8], command: &str, overrides: &[String], seed: u64) -> Self {
        RunManifest {
            config_digest: sha256_hex(config_bytes),
            command: command.to_string(),
            overrides: overrides.to_vec(),
            resolved_seed: seed,
            module_versions: vec![(
                "hskit".to_string(),
                env!("CARGO_PKG_VERSION").to_string(),
            )],
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            wall_seconds: 0.0,
            emitted_files: Vec::new(),
        }
    }

    pub fn record_file(&mut self, path: &Path) {
        self.emitted_files
            .push(path.file_name().unwrap_or_default().to_string_lossy().into());
    }

    /// Finalize timestamps and write atomically (temp file + rename).
    pub fn finish(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.finished_unix_ms = now_ms();
        self.wall_seconds =
            (self.finished_unix_ms.saturating_sub(self.started_unix_ms)) as f64 / 1000.0;
        let target = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(serde_json::to_string_pretty(&self)?.as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &target)?;
        Ok(target)
    }
}

/// Re-check a written manifest against the config bytes it claims to cover.
pub fn verify_digest(manifest_path: &Path, config_bytes: &[u8]) -> std::io::Result<bool> {
    let manifest: RunManifest =
        serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    Ok(manifest.config_digest == sha256_hex(config_bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = sha256_hex(b"hello");
        let b = sha256_hex(b"hello");
        let c = sha256_hex(b"hello!");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn manifest_roundtrip_verifies() {
        let dir = std::env::temp_dir().join(format!("hskit-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = br#"{"seed": 1}"#;
        let mut m = RunManifest::begin(cfg, "bgscan", &[], 1);
        m.record_file(Path::new("report.csv"));
        let path = m.finish(&dir).unwrap();
        assert!(verify_digest(&path, cfg).unwrap());
        assert!(!verify_digest(&path, b"{}").unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
