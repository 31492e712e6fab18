//! Config files for the CLI.
//!
//! Two formats are accepted and turned into `--key=value` arguments that are
//! placed before the command-line flags, so explicit flags win:
//!
//! * flat text, one `key = value` per line, `#` starts a comment;
//! * a run manifest (`*.json`) whose `args` object maps keys to values.
//!
//! Keys may use `-` or `_`. A value of `true` becomes a bare switch and
//! `false` drops the key. Lists are comma-separated.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

fn flag(key: &str, value: &str) -> Option<String> {
    let key = key.trim().replace('_', "-");
    match value.trim() {
        "true" => Some(format!("--{key}")),
        "false" => None,
        v => Some(format!("--{key}={v}")),
    }
}

pub fn parse_flat(text: &str, path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        if key.trim().is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: "empty key".into(),
            });
        }
        out.extend(flag(key, value));
    }
    Ok(out)
}

fn json_scalar(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        Value::Array(items) => Some(items.iter().filter_map(json_scalar).collect::<Vec<_>>().join(",")),
        other => Some(other.to_string()),
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<String>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let args = root
        .get("args")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "manifest has no `args` object".into(),
        })?;
    Ok(args
        .iter()
        .filter_map(|(k, v)| json_scalar(v).and_then(|s| flag(k, &s)))
        .collect())
}

pub fn load(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        parse_manifest(&text, path)
    } else {
        parse_flat(&text, path)
    }
}

/// Serialised argument struct to the `args` object of a manifest: keys in
/// kebab case, `null` entries and empty lists dropped.
pub fn args_object(value: &Value) -> Value {
    let Some(map) = value.as_object() else {
        return Value::Null;
    };
    Value::Object(
        map.iter()
            .filter(|(_, v)| !v.is_null() && !v.as_array().is_some_and(|a| a.is_empty()))
            .map(|(k, v)| (k.replace('_', "-"), v.clone()))
            .collect(),
    )
}
