//! `key = value` configuration text.
//!
//! Blank lines and `#` comments are ignored. Later assignments of the same
//! key override earlier ones, which is how `--set` overrides are layered on
//! top of a file.

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            kv.set_assignment(line)
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(kv)
    }

    /// Applies a single `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected `key = value`, got `{assignment}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("empty key in `{assignment}`")));
        }
        self.set(key, value.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Splits into the entries whose key is in `keys` and the rest.
    pub fn partition(&self, keys: &[&str]) -> (KeyValues, KeyValues) {
        let (a, b): (Vec<_>, Vec<_>) = self
            .entries
            .iter()
            .cloned()
            .partition(|(k, _)| keys.contains(&k.as_str()));
        (KeyValues { entries: a }, KeyValues { entries: b })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn parse_bool_like(value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("expected a boolean, got `{value}`"))),
    }
}
