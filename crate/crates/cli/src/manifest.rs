//! Per-run reproducibility record written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    /// SHA-256 of the file, or of the sorted member files for a directory.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub timings_ms: BTreeMap<String, f64>,
    /// Items left out of the run, by reason.
    pub skipped: BTreeMap<String, usize>,
    /// Free-form counts (entries added, cases written, ...).
    pub counts: BTreeMap<String, usize>,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            seed: None,
            artifacts: Vec::new(),
            timings_ms: BTreeMap::new(),
            skipped: BTreeMap::new(),
            counts: BTreeMap::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = hash_path(path)?;
        self.inputs.push(InputHash {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn skip(&mut self, reason: &str, n: usize) {
        *self.skipped.entry(reason.to_string()).or_default() += n;
    }

    pub fn count(&mut self, what: &str, n: usize) {
        self.counts.insert(what.to_string(), n);
    }

    /// Runs `f` and records its wall time under `label`.
    pub fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms
            .insert(label.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file, or of a directory's regular files taken in name order
/// (each contributes its name and contents).
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut h = Sha256::new();
        for p in names {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(sha256_bytes(&bytes))
    }
}

/// Manifest location for an output: `<dir>/run_manifest.json` for directory
/// outputs, `<file>.manifest.json` otherwise.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run_manifest.json")
    } else {
        sibling(out, "manifest.json")
    }
}

/// `dir/stem.suffix` for `dir/stem.ext`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_replaces_extension() {
        assert_eq!(
            sibling(Path::new("a/b/eval.json"), "instances.jsonl"),
            PathBuf::from("a/b/eval.instances.jsonl")
        );
        assert_eq!(
            sibling(Path::new("x"), "manifest.json"),
            PathBuf::from("x.manifest.json")
        );
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn directory_hash_ignores_creation_order() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        fs::write(a.path().join("x"), "1").unwrap();
        fs::write(a.path().join("y"), "2").unwrap();
        fs::write(b.path().join("y"), "2").unwrap();
        fs::write(b.path().join("x"), "1").unwrap();
        assert_eq!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
        fs::write(b.path().join("x"), "3").unwrap();
        assert_ne!(hash_path(a.path()).unwrap(), hash_path(b.path()).unwrap());
    }
}
