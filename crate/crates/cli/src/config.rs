//! Config loading and dot-path overrides.

use std::path::Path;

use riskmm::corridor::CorridorConfig;
use serde_json::Value;

use crate::Failure;

/// Read `path` (or take the defaults) and apply `key=value` overrides in order.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<CorridorConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("cannot read {}: {e}", p.display())))?;
            CorridorConfig::from_json(&text).map_err(|e| Failure::config(e.to_string()))?
        }
        None => CorridorConfig::default(),
    };
    if !overrides.is_empty() {
        let mut doc: Value = serde_json::from_str(&cfg.to_json()).map_err(|e| Failure::config(e.to_string()))?;
        for (key, raw) in overrides {
            set_path(&mut doc, key, parse_value(raw))?;
        }
        cfg = serde_json::from_value(doc).map_err(|e| Failure::config(format!("after overrides: {e}")))?;
    }
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(cfg)
}

/// JSON if it parses, otherwise a bare string (so `risk.formulation=pessimistic` works).
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), Failure> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Failure::config(format!("unknown config field {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Failure::config("empty override key"))
}

/// Split `a.b=v` into its key and value.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}
