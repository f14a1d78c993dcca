//! `run.json`: the resolved config plus content hashes of every input file.

use std::fs;
use std::path::{Path, PathBuf};

use gazeseg::config::RunConfig;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// SHA-256 of `blob <len>\0<content>`, the way git names a blob.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Files under `path` (or `path` itself), sorted.
fn files_under(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| CliError::data(dir.display(), e))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Default)]
pub struct Inputs {
    entries: Vec<(String, String)>,
}

impl Inputs {
    pub fn add(&mut self, path: &Path) -> Result<(), CliError> {
        for f in files_under(path)? {
            let bytes = fs::read(&f).map_err(|e| CliError::data(f.display(), e))?;
            self.entries
                .push((f.display().to_string(), blob_hash(&bytes)));
        }
        Ok(())
    }

    /// Hash over the sorted `(path, blob hash)` list and the resolved config.
    pub fn combined(&self, config_json: &str) -> String {
        let mut entries = self.entries.clone();
        entries.sort();
        let mut h = Sha256::new();
        h.update(blob_hash(config_json.as_bytes()).as_bytes());
        for (path, hash) in &entries {
            h.update(format!("\n{hash} {path}").as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Writes `<dir>/run.json`.
pub fn write_run_json(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &Inputs,
    extra: Map<String, Value>,
) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let config_json = cfg.to_json_pretty();
    let files: Map<String, Value> = inputs
        .entries
        .iter()
        .map(|(p, h)| (p.clone(), Value::String(h.clone())))
        .collect();
    let mut doc = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": serde_json::to_value(cfg).expect("config serialises"),
        "inputs": files,
        "content_hash": inputs.combined(&config_json),
    });
    doc.as_object_mut().expect("object").extend(extra);
    let text = serde_json::to_string_pretty(&doc).expect("json") + "\n";
    fs::write(dir.join("run.json"), text)?;
    Ok(())
}
