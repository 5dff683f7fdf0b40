//! Flat `key = value` text configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Keys are
//! kept in insertion order so a config can be written back out unchanged.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::ConfigError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: lineno + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: lineno + 1,
                    text: raw.to_string(),
                });
            }
            cfg.set(key, value.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Inserts or overwrites `key`.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get_str(key).is_some()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn require_str(&self, key: &str) -> Result<&str, ConfigError> {
        self.get_str(key)
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.require_str(key)?;
        raw.parse().map_err(|_| ConfigError::Invalid {
            key: key.to_string(),
            value: raw.to_string(),
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        if self.contains(key) {
            self.require(key)
        } else {
            Ok(default)
        }
    }

    /// Comma separated list of values.
    pub fn require_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        let raw = self.require_str(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                item.parse().map_err(|_| ConfigError::Invalid {
                    key: key.to_string(),
                    value: raw.to_string(),
                })
            })
            .collect()
    }

    /// Overlays every entry of `other` on top of `self`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.set(k, v.clone());
        }
    }
}

impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let cfg = KvConfig::parse("# header\n\ndt = 0.1  # seconds\nname=ssp\n").unwrap();
        assert_eq!(cfg.require::<f64>("dt").unwrap(), 0.1);
        assert_eq!(cfg.get_str("name"), Some("ssp"));
        assert_eq!(cfg.keys().count(), 2);
    }

    #[test]
    fn rejects_line_without_equals() {
        let err = KvConfig::parse("dt 0.1").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
    }

    #[test]
    fn later_keys_override_and_lists_parse() {
        let mut cfg = KvConfig::parse("a = 1\nb = 1, 2,3\na = 2").unwrap();
        assert_eq!(cfg.require::<i32>("a").unwrap(), 2);
        assert_eq!(cfg.require_list::<i32>("b").unwrap(), vec![1, 2, 3]);
        let over = KvConfig::parse("b = 4").unwrap();
        cfg.merge(&over);
        assert_eq!(cfg.require_list::<i32>("b").unwrap(), vec![4]);
        assert!(matches!(
            cfg.require::<f64>("missing"),
            Err(ConfigError::Missing(_))
        ));
        assert!(matches!(
            KvConfig::parse("x = abc").unwrap().require::<f64>("x"),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn display_round_trips() {
        let cfg = KvConfig::parse("a = 1\nb = x,y").unwrap();
        assert_eq!(KvConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }
}
