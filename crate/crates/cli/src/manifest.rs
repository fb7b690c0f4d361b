//! Run manifests: what was run, on which inputs, producing which outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style object hash: SHA-256 of `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(content_hash(&std::fs::read(path)?))
}

#[derive(Debug, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub data_paths: Vec<String>,
    pub seed: u64,
    pub output_dir: Option<String>,
    /// Parameters that shaped the run beyond the inputs.
    pub settings: BTreeMap<String, serde_json::Value>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            seed,
            ..Self::default()
        }
    }

    pub fn setting(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("setting serializes");
        self.settings.insert(key.into(), v);
    }

    /// Records the hash of every regular file under `path`.
    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        for f in files(path)? {
            self.inputs.insert(display(&f), file_hash(&f)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.insert(display(path), file_hash(path)?);
        Ok(())
    }

    /// Hash of the manifest body, which covers every input and output hash.
    pub fn hash(&self) -> String {
        content_hash(
            serde_json::to_string(self)
                .expect("manifest serializes")
                .as_bytes(),
        )
    }

    /// Writes `manifest.json` into `dir` and returns the manifest hash.
    pub fn write(&self, dir: &Path) -> std::io::Result<String> {
        let hash = self.hash();
        let mut body = serde_json::to_value(self).expect("manifest serializes");
        body["manifest_hash"] = serde_json::Value::String(hash.clone());
        let text = serde_json::to_string_pretty(&body).expect("manifest serializes") + "\n";
        std::fs::write(dir.join("manifest.json"), text)?;
        Ok(hash)
    }
}

fn display(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn files(path: &Path) -> std::io::Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json"))
        .collect();
    out.sort();
    Ok(out)
}
