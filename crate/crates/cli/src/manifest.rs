//! Run-directory manifest: one entry per command invocation.

use std::fs;
use std::path::{Path, PathBuf};

use rescorr::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
pub struct Output {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
pub struct Entry {
    pub command: String,
    pub status: String,
    pub config_sha256: String,
    pub outputs: Vec<Output>,
    #[serde(default)]
    pub audits: serde_json::Value,
}

#[derive(Serialize, Deserialize, Default)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub entries: Vec<Entry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Appends `entry` to `dir/manifest.json`, hashing each listed output.
pub fn record(
    dir: &Path,
    command: &str,
    status: &str,
    config_json: &str,
    outputs: &[PathBuf],
    audits: serde_json::Value,
) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut m: Manifest = match fs::read_to_string(&path) {
        Ok(t) => serde_json::from_str(&t)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        Err(_) => Manifest::default(),
    };
    m.tool = "rescorr".into();
    m.version = env!("CARGO_PKG_VERSION").into();
    let outputs = outputs
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            Ok(Output {
                path: rel.display().to_string(),
                sha256: file_sha256(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    m.entries.push(Entry {
        command: command.into(),
        status: status.into(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        outputs,
        audits,
    });
    fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| io(&path, e))
}
