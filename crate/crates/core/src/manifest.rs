//! Run manifests: what was run, with which resolved settings, and the
//! SHA-256 of everything read and written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Resolved command arguments (the output directory excluded).
    pub args: serde_json::Value,
    /// Fully resolved configuration objects.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input paths as given on the command line.
    pub inputs: Vec<Artifact>,
    /// Output paths relative to the run directory, sorted.
    pub outputs: Vec<Artifact>,
    /// Command-specific results (pass counters, pass/fail, ...).
    pub summary: serde_json::Value,
}

pub fn tool_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn input_artifact(path: &Path) -> Result<Artifact> {
    Ok(Artifact {
        path: path.display().to_string(),
        sha256: hash_file(path)?,
    })
}

/// Writes files under a run directory and remembers their hashes.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    outputs: BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(rel.to_string(), sha256_hex(contents.as_bytes()));
        Ok(path)
    }

    /// Registers a file written by other code.
    pub fn record(&mut self, rel: &str) -> Result<()> {
        let hash = hash_file(&self.path(rel))?;
        self.outputs.insert(rel.to_string(), hash);
        Ok(())
    }

    pub fn outputs(&self) -> Vec<Artifact> {
        self.outputs
            .iter()
            .map(|(path, sha256)| Artifact {
                path: path.clone(),
                sha256: sha256.clone(),
            })
            .collect()
    }
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Fails if any recorded input no longer hashes to its recorded value.
    pub fn verify_inputs(&self) -> Result<()> {
        for a in &self.inputs {
            let now = hash_file(Path::new(&a.path))?;
            if now != a.sha256 {
                return Err(Error::Mismatch(format!("input {} changed since the run", a.path)));
            }
        }
        Ok(())
    }

    /// Lists every output that differs between two runs.
    pub fn compare_outputs(&self, other: &RunManifest) -> Result<()> {
        let mine: BTreeMap<_, _> = self.outputs.iter().map(|a| (&a.path, &a.sha256)).collect();
        let theirs: BTreeMap<_, _> = other.outputs.iter().map(|a| (&a.path, &a.sha256)).collect();
        let mut diffs = Vec::new();
        for path in mine.keys().chain(theirs.keys()).collect::<std::collections::BTreeSet<_>>() {
            if mine.get(path) != theirs.get(path) {
                diffs.push(path.to_string());
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Mismatch(format!("outputs differ: {}", diffs.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn run_dir_tracks_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dir = RunDir::create(&tmp.path().join("run")).unwrap();
        dir.write("b.txt", "two").unwrap();
        dir.write("tables/a.csv", "one").unwrap();
        let outs = dir.outputs();
        assert_eq!(outs[0].path, "b.txt");
        assert_eq!(outs[1].path, "tables/a.csv");
        assert_eq!(outs[1].sha256, sha256_hex(b"one"));
        assert_eq!(hash_file(&dir.path("tables/a.csv")).unwrap(), outs[1].sha256);
    }

    #[test]
    fn compare_reports_differences() {
        let base = RunManifest {
            tool: tool_version(),
            command: "x".into(),
            args: serde_json::Value::Null,
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: vec![],
            outputs: vec![Artifact {
                path: "a".into(),
                sha256: "1".into(),
            }],
            summary: serde_json::Value::Null,
        };
        assert!(base.compare_outputs(&base.clone()).is_ok());
        let mut other = base.clone();
        other.outputs[0].sha256 = "2".into();
        assert!(matches!(base.compare_outputs(&other), Err(Error::Mismatch(m)) if m.contains('a')));
        let back: RunManifest = serde_json::from_str(&base.to_json()).unwrap();
        assert_eq!(back, base);
    }
}
