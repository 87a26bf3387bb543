use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::CSV_CONFIG_PREFIX;

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// A CSV writer whose first line records the run configuration.
pub fn csv_with_config(path: &Path, run_config: &Value) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{CSV_CONFIG_PREFIX}{}", serde_json::to_string(run_config)?)?;
    Ok(csv::Writer::from_writer(w))
}

/// Writes `{"command": .., "run_config": .., <body fields>}` as pretty JSON.
pub fn write_report<T: Serialize>(path: &Path, command: &str, run_config: &Value, body: &T) -> anyhow::Result<()> {
    let mut v = json!({ "command": command, "run_config": run_config });
    if let Value::Object(extra) = serde_json::to_value(body)? {
        v.as_object_mut().expect("object literal").extend(extra);
    }
    let text = serde_json::to_string_pretty(&v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
