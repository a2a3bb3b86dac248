//! Flat `key = value` configuration text with `#` comments.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::{CliError, CliResult};

/// Splits config text into `(key, value)` pairs, in order.
pub fn parse_key_values(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key = value, got {raw:?}", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key or value", n + 1)));
        }
        pairs.push((k.to_owned(), v.to_owned()));
    }
    Ok(pairs)
}

/// Applies the pairs to the serialized form of `base` and deserializes the
/// result. Keys must name existing fields. Values are read as JSON when
/// they parse (numbers, booleans, lists) and as bare strings otherwise.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, pairs: &[(String, String)]) -> CliResult<T> {
    let mut value = serde_json::to_value(base).expect("serializable");
    let Value::Object(map) = &mut value else {
        unreachable!("config types serialize to objects");
    };
    for (k, v) in pairs {
        let key = k.replace('-', "_");
        let Some(slot) = map.get_mut(&key) else {
            let mut known: Vec<&str> = map.keys().map(String::as_str).collect();
            known.sort_unstable();
            return Err(CliError::Usage(format!("unknown config key '{k}' (known: {})", known.join(", "))));
        };
        *slot = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("bad config value: {e}")))
}
