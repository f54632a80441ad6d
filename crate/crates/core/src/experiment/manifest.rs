//! JSON run manifests and the output root.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::lab::digest;

pub const OUT_ENV: &str = "CAAT_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";

/// `flag` if given, else `CAAT_OUT` if set, else `default`.
pub fn output_root(flag: Option<&Path>, default: &Path) -> PathBuf {
    if let Some(f) = flag {
        return f.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => default.to_path_buf(),
    }
}

/// `git describe --always --dirty` of the working directory, or `unknown`.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub git_describe: String,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<PathBuf>,
    /// Command-specific results.
    pub results: serde_json::Value,
}

impl RunManifest {
    /// Run id is the digest of command, seed and config.
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            run_id: digest(&(command, seed, &config)),
            command: command.into(),
            seed,
            config,
            git_describe: git_describe(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_seconds: 0.0,
            artifacts: Vec::new(),
            results: serde_json::Value::Null,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_depends_on_command_seed_and_config() {
        let a = RunManifest::new("attack", 0, &("x", 1)).unwrap();
        assert_eq!(a.run_id, RunManifest::new("attack", 0, &("x", 1)).unwrap().run_id);
        assert_ne!(a.run_id, RunManifest::new("attack", 1, &("x", 1)).unwrap().run_id);
        assert_ne!(a.run_id, RunManifest::new("finetune", 0, &("x", 1)).unwrap().run_id);
        assert_ne!(a.run_id, RunManifest::new("attack", 0, &("x", 2)).unwrap().run_id);
    }

    #[test]
    fn manifest_is_written_as_json() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("gradcheck", 0, &()).unwrap();
        let p = m.write(&dir.path().join("nested")).unwrap();
        let back: RunManifest = serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(!back.git_describe.is_empty());
    }
}
