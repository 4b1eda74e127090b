//! Per-command manifests: configuration, seeds and content hashes of every
//! input and output file. Paths are recorded by file name only so reruns in
//! different directories produce identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use matsae_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

#[derive(Serialize)]
struct FileEntry {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    config: &'a serde_json::Value,
    inputs: BTreeMap<String, FileEntry>,
    outputs: BTreeMap<String, String>,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: impl Serialize) -> Self {
        Self {
            command: command.to_owned(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> &mut Self {
        self.inputs.push((role.to_owned(), path.to_path_buf()));
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Hashes everything and writes `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut inputs = BTreeMap::new();
        for (role, p) in &self.inputs {
            inputs.insert(
                role.clone(),
                FileEntry {
                    file: file_name(p),
                    sha256: sha256_file(p)?,
                },
            );
        }
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            let rel = p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| PathBuf::from(file_name(p)));
            outputs.insert(rel.to_string_lossy().replace('\\', "/"), sha256_file(p)?);
        }
        let m = Manifest {
            command: &self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: &self.config,
            inputs,
            outputs,
        };
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, &m)?;
        Ok(path)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_ignores_directory() {
        let write = |dir: &Path| {
            let out = dir.join("a.txt");
            fs::write(&out, "x").unwrap();
            let mut m = ManifestBuilder::new("t", serde_json::json!({"seed": 1}));
            m.input("data", &out).output(&out);
            fs::read(m.write(dir).unwrap()).unwrap()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(write(a.path()), write(b.path()));
    }
}
