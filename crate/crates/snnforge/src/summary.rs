//! Run summaries and the output-directory manifest.
//!
//! Everything written here is a pure function of configuration and inputs:
//! no timestamps, no absolute paths, keys in sorted order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_ID: &str = "snnforge-run-summary/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUNS_DIR: &str = "runs";

/// The JSON schema every run summary validates against.
pub const RUN_SUMMARY_SCHEMA: &str = include_str!("../schema/run_summary.schema.json");

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(CliError::io(format!("hashing {}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Combined digest over files (relative path and content), order-independent.
pub fn files_digest(root: &Path, files: &[PathBuf]) -> Result<String> {
    let mut entries: Vec<(String, String)> =
        files.iter().map(|f| Ok((rel_string(f), file_digest(&root.join(f))?))).collect::<Result<_>>()?;
    entries.sort();
    let mut h = Sha256::new();
    for (name, digest) in entries {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update([b'\n']);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Path with `/` separators regardless of platform.
pub fn rel_string(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Files under `dir`, relative to it, sorted.
pub fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(CliError::io(format!("listing {}", d.display())))? {
            let p = e.map_err(CliError::io(format!("listing {}", d.display())))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).expect("child").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub command: String,
    pub config: Value,
    /// Input artifact name to sha256 digest.
    pub inputs: BTreeMap<String, String>,
    pub metrics: Value,
    /// Artifact paths written, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunSummary {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            schema: SCHEMA_ID.to_string(),
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            metrics: Value::Object(Default::default()),
            artifacts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    /// Artifact path to sha256 digest.
    pub artifacts: BTreeMap<String, String>,
    /// Command name to its summary path.
    pub runs: BTreeMap<String, String>,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(format!("creating {}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text + "\n").map_err(CliError::io(format!("writing {}", path.display())))
}

/// Writes `runs/<command>.json` and merges its artifacts into the manifest.
pub fn record_run(out_dir: &Path, summary: &mut RunSummary) -> Result<PathBuf> {
    summary.artifacts.sort();
    summary.artifacts.dedup();
    let rel = PathBuf::from(RUNS_DIR).join(format!("{}.json", summary.command));
    write_json(&out_dir.join(&rel), summary)?;
    let mpath = out_dir.join(MANIFEST_FILE);
    let mut manifest: Manifest = if mpath.is_file() {
        let text = fs::read_to_string(&mpath).map_err(CliError::io(format!("reading {}", mpath.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::format(&mpath, e.to_string()))?
    } else {
        Manifest::default()
    };
    for a in &summary.artifacts {
        let digest = file_digest(&out_dir.join(a))?;
        manifest.artifacts.insert(a.clone(), digest);
    }
    manifest.runs.insert(summary.command.clone(), rel_string(&rel));
    write_json(&mpath, &manifest)?;
    Ok(rel)
}
