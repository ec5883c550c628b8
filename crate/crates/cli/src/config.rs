//! Layered settings: built-in defaults, then a section of a TOML file, then
//! command-line flags. Layers are merged as JSON trees key by key.

use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Recursively overwrites `base` with the keys present in `overlay`.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// The `[section]` table of a TOML config file as JSON, or an empty object.
pub fn file_section(path: Option<&Path>, section: &str) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Failure(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::Validation(vec![format!("config {}: {e}", path.display())]))?;
    let mut unknown: Vec<String> = table
        .keys()
        .filter(|k| !crate::SECTIONS.contains(&k.as_str()))
        .map(|k| format!("config: unknown section [{k}]"))
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(CliError::Validation(unknown));
    }
    match table.get(section) {
        None => Ok(Value::Object(Map::new())),
        Some(v) => serde_json::to_value(v).map_err(|e| CliError::Failure(e.to_string())),
    }
}

/// JSON object holding only the flags that were given.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn put<T: Serialize>(&mut self, path: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("flag values serialize");
            let mut keys: Vec<&str> = path.split('.').collect();
            let last = keys.pop().expect("non-empty path");
            let mut node = &mut self.0;
            for k in keys {
                node = node
                    .entry(k)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("flag paths do not collide");
            }
            node.insert(last.to_string(), v);
        }
        self
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }
}

/// Merges the layers and deserializes the result, reporting bad fields.
pub fn resolve<T: serde::de::DeserializeOwned>(defaults: Value, file: Value, flags: Value) -> Result<(T, Value), CliError> {
    let mut merged = defaults;
    merge(&mut merged, file);
    merge(&mut merged, flags);
    let parsed = serde_json::from_value(merged.clone()).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    Ok((parsed, merged))
}
