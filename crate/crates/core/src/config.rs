//! Flat `key=value` configuration text.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are unique per
//! file; values are trimmed.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    /// 1-based line number.
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((k, v)) = trimmed.split_once('=') else {
            return Err(Error::Config(format!("line {line}: expected key=value")));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "line {line}: duplicate key `{key}` (first on line {})",
                prev.line
            )));
        }
        out.push(Entry {
            line,
            key: key.to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

impl Entry {
    pub fn parse<T: std::str::FromStr>(&self) -> Result<T> {
        self.value.parse().map_err(|_| {
            Error::Config(format!(
                "line {}: invalid value `{}` for `{}`",
                self.line, self.value, self.key
            ))
        })
    }

    pub fn parse_bool(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(Error::Config(format!(
                "line {}: invalid boolean `{}` for `{}`",
                self.line, self.value, self.key
            ))),
        }
    }

    pub fn parse_list<T: std::str::FromStr>(&self) -> Result<Vec<T>> {
        if self.value.is_empty() {
            return Ok(Vec::new());
        }
        self.value
            .split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "line {}: invalid list item `{}` for `{}`",
                        self.line, part, self.key
                    ))
                })
            })
            .collect()
    }

    pub fn unknown(&self) -> Error {
        Error::Config(format!("line {}: unknown key `{}`", self.line, self.key))
    }
}
