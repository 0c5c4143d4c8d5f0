//! Provenance records written next to every artifact.
//!
//! `<artifact>.manifest.json` holds the artifact's SHA-256, the hashes of the
//! inputs it was derived from, the config hash and the tool version. Inputs
//! are checked against their own manifests before use.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub artifact: FileHash,
    pub inputs: Vec<FileHash>,
    pub config_hash: String,
    /// Full config echo, enough to regenerate the artifact.
    pub config: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

impl Manifest {
    pub fn load(artifact: &Path) -> Result<Self> {
        let p = manifest_path(artifact);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, artifact: &Path) -> Result<()> {
        let p = manifest_path(artifact);
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

/// Hashes `artifact` and writes its manifest.
pub fn record(
    artifact: &Path,
    command: &str,
    inputs: &[FileHash],
    config_hash: &str,
    config: serde_json::Value,
) -> Result<Manifest> {
    let m = Manifest {
        tool_version: TOOL_VERSION.to_string(),
        command: command.to_string(),
        artifact: FileHash {
            path: artifact.display().to_string(),
            sha256: sha256_file(artifact)?,
        },
        inputs: inputs.to_vec(),
        config_hash: config_hash.to_string(),
        config,
    };
    m.write(artifact)?;
    Ok(m)
}

/// Checks an input artifact against the hash its manifest declares and
/// returns the verified hash.
pub fn verify(artifact: &Path) -> Result<FileHash> {
    let m = Manifest::load(artifact)?;
    let actual = sha256_file(artifact)?;
    if actual != m.artifact.sha256 {
        return Err(Error::HashMismatch {
            path: artifact.to_path_buf(),
            declared: m.artifact.sha256,
            actual,
        });
    }
    Ok(FileHash {
        path: artifact.display().to_string(),
        sha256: actual,
    })
}
