//! JSON config files with command-line overrides. Flags win over file
//! values; the resolved config, with every default filled in, is echoed.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{io_err, CliError, CliResult};

/// Reads the config file, or starts from an empty object.
pub fn read_value(path: Option<&Path>) -> CliResult<Value> {
    match path {
        None => Ok(Value::Object(Map::new())),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: invalid JSON: {e}", p.display())))?;
            if !v.is_object() {
                return Err(CliError::config(format!("{}: top level must be an object", p.display())));
            }
            Ok(v)
        }
    }
}

/// Sets `path` (object keys) to `value`, creating objects on the way.
pub fn set(root: &mut Value, path: &[&str], value: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        let obj = cur.as_object_mut().expect("config nodes are objects");
        let next = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if !next.is_object() {
            *next = Value::Object(Map::new());
        }
        cur = next;
    }
    cur.as_object_mut()
        .expect("config nodes are objects")
        .insert(path[path.len() - 1].to_string(), value);
}

pub fn set_opt<T: Serialize>(root: &mut Value, path: &[&str], value: Option<T>) {
    if let Some(v) = value {
        set(root, path, serde_json::to_value(v).expect("plain values serialize"));
    }
}

pub fn resolve<T: DeserializeOwned>(value: Value, origin: &str) -> CliResult<T> {
    serde_json::from_value(value).map_err(|e| CliError::config(format!("{origin}: {e}")))
}

/// Pretty JSON with a trailing newline.
pub fn echo<T: Serialize>(config: &T) -> String {
    serde_json::to_string_pretty(config).expect("configs serialize") + "\n"
}

pub fn write_echo<T: Serialize>(dir: &Path, config: &T) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let p = dir.join("config.json");
    std::fs::write(&p, echo(config)).map_err(|e| io_err(&p, e))?;
    Ok(p)
}

pub fn origin(path: Option<&Path>) -> String {
    path.map(|p| p.display().to_string()).unwrap_or_else(|| "config".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn set_creates_nested_objects_and_overrides() {
        let mut v = json!({"a": {"b": 1}, "c": 3});
        set(&mut v, &["a", "b"], json!(2));
        set(&mut v, &["x", "y", "z"], json!("q"));
        set(&mut v, &["c", "d"], json!(true));
        assert_eq!(v, json!({"a": {"b": 2}, "c": {"d": true}, "x": {"y": {"z": "q"}}}));
        set_opt::<u64>(&mut v, &["a", "b"], None);
        assert_eq!(v["a"]["b"], json!(2));
    }
}
