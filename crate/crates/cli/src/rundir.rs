//! Per-run artifact directories: `<root>/<config hash>-<unix seconds>`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const ROOT_ENV: &str = "DIT_DESK_DIR";
const DEFAULT_ROOT: &str = "runs";

/// First 12 hex digits of the SHA-256 of the command name and resolved config.
pub fn config_hash<T: Serialize>(command: &str, config: &T) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(config)?);
    Ok(h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect())
}

pub fn root() -> PathBuf {
    std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

/// Creates a fresh run directory and writes the resolved config into it.
pub fn create<T: Serialize>(command: &str, config: &T) -> anyhow::Result<PathBuf> {
    let hash = config_hash(command, config)?;
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = root().join(format!("{hash}-{secs}"));
    let dir = first_free(&base);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config)?)?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

fn first_free(base: &Path) -> PathBuf {
    if !base.exists() {
        return base.to_owned();
    }
    (1..)
        .map(|i| {
            let mut s = base.as_os_str().to_owned();
            s.push(format!("-{i}"));
            PathBuf::from(s)
        })
        .find(|p| !p.exists())
        .expect("unbounded suffixes")
}
