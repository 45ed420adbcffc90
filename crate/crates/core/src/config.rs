//! Plain-text `key=value` configuration files: one key per line, `#` starts a comment.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: Vec<KvEntry>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<KvEntry> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line}: expected key=value, got `{content}`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line}: empty key")));
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
            }
            entries.push(KvEntry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(KvFile { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.key == key)
            .map(|e| e.value.as_str())
    }

    pub fn entries(&self) -> &[KvEntry] {
        &self.entries
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{value}`"
        ))),
    }
}
