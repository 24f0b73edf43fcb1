//! Flat `key = value` configuration text.
//!
//! One assignment per line, `#` starts a comment (whole-line or trailing),
//! blank lines are ignored. Keys are `[a-z0-9_]+`; repeating a key is an
//! error.

use std::collections::BTreeMap;

use crate::error::{NdaError, Result};

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| NdaError::parse(n, format!("expected `key = value`, found `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty()
            || !key
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        {
            return Err(NdaError::parse(n, format!("invalid key `{key}`")));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(NdaError::parse(n, format!("duplicate key `{key}`")));
        }
    }
    Ok(out)
}
