use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use c3g_core::scene::io::write_atomic;
use sha2::{Digest, Sha256};

/// File name of the run manifest inside an artifact directory.
pub const MANIFEST_FILE: &str = "run.toml";

/// Provenance of one CLI run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// SHA-256 of the config file, or of the empty string without one.
    pub config_hash: String,
    /// Ordered `(artifact, sha256)` pairs of checkpoints read or written.
    pub checkpoints: Vec<(String, String)>,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        let mut t = toml::Table::new();
        t.insert("command".into(), self.command.clone().into());
        if let Some(p) = &self.config_path {
            t.insert("config_path".into(), p.clone().into());
        }
        t.insert("config_hash".into(), self.config_hash.clone().into());
        t.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        t.insert("version".into(), self.version.clone().into());
        t.insert("started".into(), self.started.into());
        t.insert("finished".into(), self.finished.into());
        let mut ck = toml::Table::new();
        for (k, v) in &self.checkpoints {
            ck.insert(k.clone(), v.clone().into());
        }
        t.insert("checkpoints".into(), ck.into());
        t.to_string()
    }

    /// Write `run.toml` into `dir`, replacing any earlier manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, self.to_toml().as_bytes()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_toml() {
        let m = RunManifest {
            command: "c3g train --out runs/a".into(),
            config_path: Some("run.toml".into()),
            config_hash: sha256_hex(b""),
            checkpoints: vec![("c3g.bin".into(), "ab".into())],
            seed: 7,
            version: "0.1.0".into(),
            started: 1.5,
            finished: 2.5,
        };
        let t: toml::Table = m.to_toml().parse().unwrap();
        assert_eq!(t["seed"].as_integer(), Some(7));
        assert_eq!(t["checkpoints"]["c3g.bin"].as_str(), Some("ab"));
        assert_eq!(
            t["config_hash"].as_str(),
            Some("e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")
        );
    }
}
