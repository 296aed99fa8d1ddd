//! Run manifests: one JSON line recording everything needed to reproduce a
//! run bit for bit.

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};
use std::path::Path;

/// Everything a finished run leaves behind about itself.
pub struct RunManifest {
    pub command: String,
    /// Fully resolved string-valued arguments, sufficient to re-execute.
    pub args: Map<String, Value>,
    pub seed: u64,
    pub checkpoint_checksum: String,
    pub duration_seconds: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    /// Serialize as a single JSON line and write atomically.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let value = json!({
            "command": self.command,
            "args": self.args,
            "seed": self.seed,
            "checkpoint_checksum": self.checkpoint_checksum,
            "code_version": env!("CARGO_PKG_VERSION"),
            "duration_seconds": self.duration_seconds,
            "outputs": self.outputs,
        });
        let line = format!("{value}\n");
        let tmp = dir.join("manifest.json.tmp");
        let path = dir.join("manifest.json");
        std::fs::write(&tmp, line).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path)
            .with_context(|| format!("renaming manifest into {}", path.display()))?;
        Ok(())
    }
}

/// Load a manifest back as raw JSON.
pub fn read_manifest(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value =
        serde_json::from_str(text.trim()).with_context(|| "manifest is not valid JSON")?;
    if !value.get("command").is_some_and(Value::is_string) {
        bail!("manifest lacks a command field");
    }
    Ok(value)
}

/// Fetch a string argument recorded in a manifest.
pub fn arg_str<'v>(manifest: &'v Value, key: &str) -> Result<&'v str> {
    manifest
        .get("args")
        .and_then(|a| a.get(key))
        .and_then(Value::as_str)
        .with_context(|| format!("manifest lacks argument '{key}'"))
}

/// Fetch an integer argument recorded in a manifest.
pub fn arg_u64(manifest: &Value, key: &str) -> Result<u64> {
    manifest
        .get("args")
        .and_then(|a| a.get(key))
        .and_then(Value::as_u64)
        .with_context(|| format!("manifest lacks argument '{key}'"))
}
