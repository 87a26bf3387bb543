//! Layered run configuration: defaults, then a JSON file, then `--set` overrides.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// A problem with the command line or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Reads a config file. Besides plain JSON this accepts any artifact written
/// by this tool: a JSON report with a `run_config` field, or a CSV whose first
/// line is `# run_config=...`.
pub fn read_config_file(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let body = match text.lines().next().and_then(|l| l.strip_prefix(CSV_CONFIG_PREFIX)) {
        Some(line) => line.to_string(),
        None => text,
    };
    let v: Value = serde_json::from_str(&body).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    Ok(match v {
        Value::Object(mut m) if m.contains_key("run_config") => m.remove("run_config").expect("checked"),
        other => other,
    })
}

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `dotted.path=value`. The value is parsed as JSON when possible and
/// taken as a string otherwise, so `mode=dtp` and `train.steps=10` both work.
pub fn apply_set(root: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects PATH=VALUE, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(usage(format!("empty key in --set path {path:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| usage(format!("--set {path}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

/// Builds a config from its defaults, an optional file and overrides.
pub fn load<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, sets: &[String]) -> anyhow::Result<T> {
    let mut v = serde_json::to_value(T::default())?;
    if let Some(p) = file {
        merge(&mut v, read_config_file(p)?);
    }
    for s in sets {
        apply_set(&mut v, s)?;
    }
    serde_json::from_value(v).map_err(|e| usage(format!("invalid config: {e}")))
}

pub const CSV_CONFIG_PREFIX: &str = "# run_config=";
