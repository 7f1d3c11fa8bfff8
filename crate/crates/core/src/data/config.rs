use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Line-oriented `key = value` settings. `#` starts a comment; blank lines are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let k = k.trim();
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err(format!("bad key {k:?}")));
            }
            if values.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(err(format!("key {k} set twice")));
            }
        }
        Ok(Self { values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.values.insert(key.into(), value.into());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Parses `key` when present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Errors on the first key not in `valid`, listing the accepted keys.
    pub fn check_keys(&self, valid: &[&str]) -> Result<()> {
        match self.values.keys().find(|k| !valid.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}; valid keys: {}", valid.join(", ")))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = KvConfig::parse("# header\nlambda_ctc = 0.3 # weight\n\nseed=7\n", "c").unwrap();
        assert_eq!(c.get::<f64>("lambda_ctc").unwrap(), Some(0.3));
        assert_eq!(c.get_or("seed", 0u64).unwrap(), 7);
        assert_eq!(c.get::<u64>("missing").unwrap(), None);
        assert!(c.get::<u64>("lambda_ctc").is_err());
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(KvConfig::parse("novalue\n", "c").unwrap_err().to_string().contains("c:1"));
        assert!(KvConfig::parse("a = 1\na = 2\n", "c").is_err());
        assert!(KvConfig::parse("a-b = 1\n", "c").is_err());
    }

    #[test]
    fn unknown_keys_listed() {
        let c = KvConfig::parse("beam = 3\n", "c").unwrap();
        let err = c.check_keys(&["mu", "beam_size"]).unwrap_err().to_string();
        assert!(err.contains("beam") && err.contains("mu, beam_size"), "{err}");
    }
}
