//! `key=value` text blocks shared by config, camera, manifest and sidecar files.

use crate::error::{Error, Result};

/// Parses one `key=value` pair per line. Blank lines and `#` comments are
/// skipped; duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("key=value text", format!("line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(existing, _)| *existing == k) {
            return Err(Error::format("key=value text", format!("duplicate key `{k}`")));
        }
        out.push((k, v));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::BadConfigValue {
        key: key.to_string(),
        msg: format!("`{value}`: {e}"),
    })
}
