//! `key = value` configuration files: ASCII, one pair per line, `#` starts
//! a comment. Consumers take the keys they understand and reject leftovers
//! so typos surface instead of silently using defaults.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("key {key:?}: cannot parse {value:?} as {ty}")]
    BadValue { key: String, value: String, ty: &'static str },
    #[error("unknown key(s): {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
}

/// Parsed key/value pairs in file order.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: Vec<(String, String)>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::MalformedLine { line, text: raw.to_string() });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::MalformedLine { line, text: raw.to_string() });
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::DuplicateKey { line, key });
            }
            entries.push((key, value));
        }
        Ok(ConfigMap { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and returns a key's value.
    pub fn take(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn take_parsed<T: std::str::FromStr>(
        &mut self,
        key: &str,
        ty: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(value) => value.parse().map(Some).map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value,
                ty,
            }),
        }
    }

    /// Errors if any keys were never consumed.
    pub fn expect_empty(&self) -> Result<(), ConfigError> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(
                self.entries.iter().map(|(k, _)| k.clone()).collect(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let text = "# header\nepochs = 30\n\nbatch_size = 32  # inline\n";
        let mut map = ConfigMap::parse(text).unwrap();
        assert_eq!(map.take_parsed::<usize>("epochs", "usize").unwrap(), Some(30));
        assert_eq!(map.take_parsed::<usize>("batch_size", "usize").unwrap(), Some(32));
        map.expect_empty().unwrap();
    }

    #[test]
    fn rejects_malformed_and_duplicate_lines() {
        assert!(matches!(
            ConfigMap::parse("epochs 30"),
            Err(ConfigError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            ConfigMap::parse("a = 1\na = 2"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
    }

    #[test]
    fn reports_bad_values_and_unknown_keys() {
        let mut map = ConfigMap::parse("epochs = many").unwrap();
        assert!(matches!(
            map.take_parsed::<usize>("epochs", "usize"),
            Err(ConfigError::BadValue { .. })
        ));
        let map = ConfigMap::parse("mystery = 1").unwrap();
        assert!(matches!(map.expect_empty(), Err(ConfigError::UnknownKeys(_))));
    }

    #[test]
    fn float_values_roundtrip_exactly() {
        let v = 1.0e-4f64;
        let text = format!("lr = {v}");
        let mut map = ConfigMap::parse(&text).unwrap();
        assert_eq!(map.take_parsed::<f64>("lr", "f64").unwrap(), Some(v));
    }
}
