//! `run.json`: the resolved configuration of a command plus content hashes
//! of everything it read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hanerf_core::datagen::{DatasetManifest, MANIFEST_FILE};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::exit::{CmdResult, Failure};

pub const RUN_FILE: &str = "run.json";

/// SHA-256 of `blob <len>\0<bytes>`, the way git hashes file contents.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> CmdResult<String> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
    Ok(blob_hash(&bytes))
}

/// Hash of named hashes, one `<hash>  <name>` line each in name order.
pub fn tree_hash(entries: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (name, hash) in entries {
        h.update(format!("{hash}  {name}\n").as_bytes());
    }
    hex::encode(h.finalize())
}

/// Tree hash of a manifest and every file it references.
pub fn dataset_hash(root: &Path, manifest: &DatasetManifest) -> CmdResult<String> {
    let mut files = BTreeMap::new();
    files.insert(
        MANIFEST_FILE.to_string(),
        file_hash(&root.join(MANIFEST_FILE))?,
    );
    for f in &manifest.frames {
        for rel in [Some(&f.image), Some(&f.clean), f.mask.as_ref()]
            .into_iter()
            .flatten()
        {
            files.insert(rel.clone(), file_hash(&root.join(rel))?);
        }
    }
    Ok(tree_hash(&files))
}

#[derive(Serialize)]
pub struct Input {
    pub path: String,
    pub hash: String,
}

#[derive(Serialize)]
pub struct RunRecord {
    pub command: &'static str,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, Input>,
    pub input_hash: String,
    pub outputs: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(command: &'static str, config: serde_json::Value) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs: BTreeMap::new(),
            input_hash: tree_hash(&BTreeMap::new()),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path, hash: String) {
        self.inputs.insert(
            role.to_string(),
            Input {
                path: path.display().to_string(),
                hash,
            },
        );
        let by_role = self
            .inputs
            .iter()
            .map(|(k, v)| (k.clone(), v.hash.clone()))
            .collect();
        self.input_hash = tree_hash(&by_role);
    }

    /// Records the hash of `dir/name` under `name`.
    pub fn output(&mut self, dir: &Path, name: &str) -> CmdResult<()> {
        self.outputs
            .insert(name.to_string(), file_hash(&dir.join(name))?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> CmdResult<()> {
        let path = dir.join(RUN_FILE);
        let text = serde_json::to_string_pretty(self).expect("run record serializes") + "\n";
        fs::write(&path, text).map_err(|e| Failure::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_uses_git_framing() {
        let mut h = Sha256::new();
        h.update(b"blob 5\0hello");
        assert_eq!(blob_hash(b"hello"), hex::encode(h.finalize()));
    }

    #[test]
    fn tree_hash_is_order_independent_of_insertion() {
        let a: BTreeMap<_, _> = [
            ("x".to_string(), "1".to_string()),
            ("y".to_string(), "2".to_string()),
        ]
        .into();
        let b: BTreeMap<_, _> = [
            ("y".to_string(), "2".to_string()),
            ("x".to_string(), "1".to_string()),
        ]
        .into();
        assert_eq!(tree_hash(&a), tree_hash(&b));
        let c: BTreeMap<_, _> = [
            ("x".to_string(), "2".to_string()),
            ("y".to_string(), "1".to_string()),
        ]
        .into();
        assert_ne!(tree_hash(&a), tree_hash(&c));
    }
}
