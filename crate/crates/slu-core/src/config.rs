//! Flat `key = value` config documents: one pair per line, `#` comments.

use crate::error::{Result, SluError};
use std::collections::BTreeMap;

pub type KvMap = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            SluError::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(SluError::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(SluError::Config(format!(
                "line {}: duplicate key `{key}`",
                i + 1
            )));
        }
    }
    Ok(map)
}

pub fn format_kv(map: &KvMap) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn take_parsed<T: std::str::FromStr>(map: &mut KvMap, key: &str) -> Result<Option<T>> {
    match map.remove(key) {
        None => Ok(None),
        Some(v) => v.parse::<T>().map(Some).map_err(|_| {
            SluError::Config(format!("key `{key}`: cannot parse value `{v}`"))
        }),
    }
}

pub fn require<T: std::str::FromStr>(map: &mut KvMap, key: &str) -> Result<T> {
    take_parsed(map, key)?
        .ok_or_else(|| SluError::Config(format!("missing required key `{key}`")))
}

/// Error out on any keys the caller did not consume.
pub fn reject_unknown(map: &KvMap) -> Result<()> {
    if let Some(key) = map.keys().next() {
        return Err(SluError::Config(format!("unknown key `{key}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let text = "# a comment\n\nalpha = 1\nbeta = two words\n";
        let map = parse_kv(text).unwrap();
        assert_eq!(map["alpha"], "1");
        assert_eq!(map["beta"], "two words");
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse_kv("a = 1\na = 2\n").is_err());
        assert!(parse_kv("not a pair\n").is_err());
    }

    #[test]
    fn roundtrip() {
        let mut map = KvMap::new();
        map.insert("x".into(), "1.5".into());
        map.insert("name".into(), "lstm".into());
        let parsed = parse_kv(&format_kv(&map)).unwrap();
        assert_eq!(parsed, map);
    }
}
