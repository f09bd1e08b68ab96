//! Run manifests: resolved config, seed, and SHA-256 hashes of every
//! artifact a command wrote, as flat key=value text.

use std::path::{Path, PathBuf};

use lexvq::config::ConfigMap;
use lexvq::io::atomic_write_string;
use lexvq::{Error, Result};
use sha2::{Digest, Sha256};

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Writes `manifest.txt` under `out_dir`. `extras` are command-specific
/// keys (checkpoint paths, step counts) needed to re-run bit-identically.
pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    resolved: &ConfigMap,
    extras: &[(&str, String)],
    outputs: &[PathBuf],
) -> Result<()> {
    let mut lines = Vec::new();
    lines.push(format!("command={command}"));
    for (k, v) in extras {
        lines.push(format!("{k}={v}"));
    }
    for (k, v) in resolved.iter() {
        lines.push(format!("cfg.{k}={v}"));
    }
    let mut outputs: Vec<&PathBuf> = outputs.iter().collect();
    outputs.sort();
    for path in outputs {
        let name = path
            .strip_prefix(out_dir)
            .unwrap_or(path)
            .display()
            .to_string();
        lines.push(format!("hash.{name}={}", file_sha256(path)?));
    }
    let mut text = lines.join("\n");
    text.push('\n');
    atomic_write_string(&out_dir.join("manifest.txt"), &text)
}
