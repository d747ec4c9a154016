//! Flat dotted-key JSON configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {msg}")]
    Invalid { key: String, msg: String },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Flattens nested objects into `a.b.c` keys. Arrays and scalars are leaves.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", value, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if !entry.is_object() {
                *entry = Value::Object(Map::new());
            }
            node = entry.as_object_mut().expect("object just ensured");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

pub fn to_flat<C: Serialize>(config: &C) -> BTreeMap<String, Value> {
    flatten(&serde_json::to_value(config).expect("configs serialize"))
}

/// Parses a command-line override value: JSON if it parses, otherwise a string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Builds a config from defaults, an optional JSON file (flat or nested keys) and
/// `key=value` overrides, in that order. Unknown keys are rejected.
pub fn resolve<C: Serialize + DeserializeOwned>(
    defaults: &C,
    file: Option<&Path>,
    overrides: &[(String, Value)],
) -> Result<C> {
    let mut flat = to_flat(defaults);
    // Nested values are applied leaf by leaf, so every leaf must already exist.
    let mut apply = |key: String, v: Value| -> Result<()> {
        for (k, leaf) in flatten(&v) {
            let full = if k.is_empty() { key.clone() } else { format!("{key}.{k}") };
            match flat.get_mut(&full) {
                Some(slot) => *slot = leaf,
                None => return Err(ConfigError::UnknownKey(full)),
            }
        }
        Ok(())
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let v: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let Value::Object(map) = v else { return Err(ConfigError::Parse("config must be a JSON object".into())) };
        for (k, v) in map {
            apply(k, v)?;
        }
    }
    for (k, v) in overrides {
        apply(k.clone(), v.clone())?;
    }
    serde_json::from_value(unflatten(&flat)).map_err(|e| ConfigError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: u32,
        b: f64,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Outer {
        inner: Inner,
        name: String,
        counts: BTreeMap<String, u32>,
    }

    fn defaults() -> Outer {
        Outer { inner: Inner { a: 1, b: 2.0 }, name: "x".into(), counts: [("k".to_string(), 3)].into() }
    }

    #[test]
    fn flatten_round_trip() {
        let v = serde_json::to_value(defaults()).unwrap();
        let flat = flatten(&v);
        assert_eq!(flat["inner.a"], Value::from(1));
        assert_eq!(unflatten(&flat), v);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"inner.a": 5, "inner": {"b": 7.5}, "counts": {"k": 1}}"#).unwrap();
        let c: Outer = resolve(&defaults(), Some(&p), &[("name".into(), parse_value("hello"))]).unwrap();
        assert_eq!(c, Outer { inner: Inner { a: 5, b: 7.5 }, name: "hello".into(), counts: [("k".to_string(), 1)].into() });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = resolve(&defaults(), None, &[("inner.zzz".into(), Value::from(1))]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "inner.zzz"));
        let err = resolve(&defaults(), None, &[("counts".into(), parse_value(r#"{"q": 2}"#))]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "counts.q"));
    }
}
