//! JSON config files with `--set key=value` overrides.
//!
//! Override keys are dot-separated paths into the JSON document
//! (`fitness.timeout_secs`, `k.1`). Numeric segments index arrays. The value
//! is parsed as JSON when possible and taken as a plain string otherwise, so
//! `--set seed=7` sets a number and `--set fitness.metric=bleu` a string.
//! Missing objects along the path are created.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| format!("override `{s}` is not of the form key=value"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(format!("override `{s}` has an empty key segment"));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Override {
            path: key.split('.').map(str::to_string).collect(),
            value,
        })
    }
}

/// Applies one override in place.
pub fn apply_override(doc: &mut Value, ov: &Override) -> Result<()> {
    let key = ov.path.join(".");
    let mut cur = doc;
    for (i, seg) in ov.path.iter().enumerate() {
        let last = i + 1 == ov.path.len();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.clone(), ov.value.clone());
                    return Ok(());
                }
                map.entry(seg.clone()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| {
                    Error::config(format!("--set {key}"), format!("`{seg}` indexes an array"))
                })?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| {
                    Error::config(
                        format!("--set {key}"),
                        format!("index {idx} is out of range for length {len}"),
                    )
                })?;
                if last {
                    *slot = ov.value.clone();
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(Error::config(
                    format!("--set {key}"),
                    format!("`{seg}` descends into a scalar"),
                ))
            }
        };
    }
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e))
}

/// Deserializes a document after applying `overrides` in order.
pub fn from_value<T: DeserializeOwned>(
    mut doc: Value,
    overrides: &[Override],
    context: &str,
) -> Result<T> {
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::config(context, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, overrides: &[Override]) -> Result<T> {
    from_value(read_json(path)?, overrides, &path.display().to_string())
}

/// Interprets `p` relative to `base_dir` unless it is absolute.
pub fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Directory holding `config_path`, for resolving relative paths inside it.
pub fn config_dir(config_path: &Path) -> PathBuf {
    match config_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn set(doc: &mut Value, s: &str) -> Result<()> {
        apply_override(doc, &s.parse().unwrap())
    }

    #[test]
    fn parses_json_or_string() {
        let ov: Override = "a.b=3".parse().unwrap();
        assert_eq!(ov.path, vec!["a", "b"]);
        assert_eq!(ov.value, json!(3));
        let ov: Override = "metric=rouge_l".parse().unwrap();
        assert_eq!(ov.value, json!("rouge_l"));
        let ov: Override = "k=[0.5,1]".parse().unwrap();
        assert_eq!(ov.value, json!([0.5, 1]));
        assert!("novalue".parse::<Override>().is_err());
        assert!("a..b=1".parse::<Override>().is_err());
    }

    #[test]
    fn nested_and_indexed() {
        let mut doc = json!({"k": [0.1, 0.2], "cma": {"sigma0": 0.1}});
        set(&mut doc, "k.1=0.9").unwrap();
        set(&mut doc, "cma.popsize=12").unwrap();
        set(&mut doc, "fitness.kind=vector_target").unwrap();
        assert_eq!(
            doc,
            json!({"k": [0.1, 0.9], "cma": {"sigma0": 0.1, "popsize": 12}, "fitness": {"kind": "vector_target"}})
        );
        assert!(set(&mut doc, "k.5=1").is_err());
        assert!(set(&mut doc, "cma.sigma0.x=1").is_err());
    }

    #[test]
    fn resolve_keeps_absolute() {
        assert_eq!(
            resolve(Path::new("/a"), Path::new("b.json")),
            PathBuf::from("/a/b.json")
        );
        assert_eq!(
            resolve(Path::new("/a"), Path::new("/c")),
            PathBuf::from("/c")
        );
        assert_eq!(config_dir(Path::new("evo.json")), PathBuf::from("."));
    }
}
