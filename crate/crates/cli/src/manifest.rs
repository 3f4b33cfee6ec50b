//! Run manifests: what was run, on which bytes, and what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use vlprobe::Error;

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub backend: Option<String>,
    /// Fully resolved config: defaults, then the config file, then flags.
    pub config: Value,
    pub seed: Option<u64>,
    pub workers: usize,
    /// Absolute paths of everything read.
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

/// SHA-256 of a file, or of a directory listing where each line is
/// `relative/path<TAB>sha256` in sorted order.
pub fn digest(path: &Path) -> Result<String, Error> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if !path.is_dir() {
        return Ok(hex::encode(Sha256::digest(fs::read(path).map_err(io)?)));
    }
    let mut files = Vec::new();
    collect(path, path, &mut files).map_err(io)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let d = hex::encode(Sha256::digest(fs::read(path.join(&rel)).map_err(io)?));
        h.update(format!("{}\t{d}\n", rel.display()));
    }
    Ok(hex::encode(h.finalize()))
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

pub fn input(role: &str, path: &Path) -> Result<FileDigest, Error> {
    let abs = fs::canonicalize(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(FileDigest {
        role: role.to_string(),
        sha256: digest(&abs)?,
        path: abs,
    })
}

pub fn outputs(out_dir: &Path, written: &[PathBuf]) -> Result<Vec<FileDigest>, Error> {
    written
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(out_dir).unwrap_or(p).to_path_buf();
            Ok(FileDigest {
                role: "output".into(),
                sha256: digest(p)?,
                path: rel,
            })
        })
        .collect()
}

/// Fails when any input no longer hashes to its recorded digest.
pub fn verify_inputs(manifest: &RunManifest) -> Result<(), Error> {
    for f in &manifest.inputs {
        let now = digest(&f.path)?;
        if now != f.sha256 {
            return Err(Error::Schema(format!(
                "{} {} changed since the run (sha256 {} != {})",
                f.role,
                f.path.display(),
                now,
                f.sha256
            )));
        }
    }
    Ok(())
}

pub fn write(manifest: &RunManifest, out_dir: &Path) -> anyhow::Result<PathBuf> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn load(path: &Path) -> Result<RunManifest, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Error::Schema(format!("unsupported manifest schema {}", m.schema)));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_digest_tracks_names_and_contents() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a"), "1").unwrap();
        fs::write(dir.path().join("sub/b"), "2").unwrap();
        let d0 = digest(dir.path()).unwrap();
        assert_eq!(d0, digest(dir.path()).unwrap());
        fs::write(dir.path().join("sub/b"), "3").unwrap();
        let d1 = digest(dir.path()).unwrap();
        assert_ne!(d0, d1);
        fs::rename(dir.path().join("a"), dir.path().join("c")).unwrap();
        assert_ne!(d1, digest(dir.path()).unwrap());
    }
}
