//! `key = value` text with `#` comments, and seed derivation.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Parses one `key = value` per line. Blank lines and `#` comments are skipped;
/// repeated keys are rejected.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(CoreError::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CoreError::Config(format!("line {}: key {key} given twice", n + 1)));
        }
    }
    Ok(out)
}

/// Renders pairs in the given order, one per line.
pub fn render<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Fails on any key not in `known`.
pub fn reject_unknown(map: &BTreeMap<String, String>, known: &[&str]) -> Result<()> {
    let unknown: Vec<&str> = map.keys().map(String::as_str).filter(|k| !known.contains(k)).collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(CoreError::Config(format!("unknown config keys: {}", unknown.join(", "))))
    }
}

/// Typed lookup with a default for absent keys.
pub fn get<T>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    match map.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|e| CoreError::Config(format!("{key} = {v:?}: {e}"))),
    }
}

/// Child seed for a named consumer of `seed`. Consumers never share a stream, and
/// adding one does not change the others.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
