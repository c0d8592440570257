//! Flat `key = value` text files used for run configs and checkpoint sidecars.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs. Lines starting with `#` and blank lines are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
    path: PathBuf,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut kv = KeyValues {
            entries: Vec::new(),
            path: path.clone(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::KeyValue {
                path: path.clone(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if kv.get(k).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
            kv.entries.push((k.to_owned(), v.to_owned()));
        }
        Ok(kv)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses `key` when present.
    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| Error::KeyValue {
                    path: self.path.clone(),
                    line: self.line_of(key),
                    msg: format!("invalid value `{v}` for `{key}`: {e}"),
                })
            })
            .transpose()
    }

    fn line_of(&self, key: &str) -> usize {
        std::fs::read_to_string(&self.path)
            .ok()
            .and_then(|t| {
                t.lines()
                    .position(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == key))
            })
            .map_or(0, |i| i + 1)
    }

    /// Inserts or replaces `key`.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Fails on the first key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::KeyValue {
                path: self.path.clone(),
                line: self.line_of(k),
                msg: format!("unknown key `{k}`"),
            }),
            None => Ok(()),
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let kv = KeyValues::parse("# run\nlr = 0.001\n\nbatch_size=8\n", "x.cfg").unwrap();
        assert_eq!(kv.get("lr"), Some("0.001"));
        assert_eq!(kv.parse_value::<usize>("batch_size").unwrap(), Some(8));
        assert_eq!(kv.render(), "lr = 0.001\nbatch_size = 8\n");
        assert_eq!(KeyValues::parse(&kv.render(), "y").unwrap().entries(), kv.entries());
    }

    #[test]
    fn errors_name_the_line() {
        let err = KeyValues::parse("a = 1\nnonsense\n", "x.cfg").unwrap_err();
        assert!(matches!(err, Error::KeyValue { line: 2, .. }));
        assert!(KeyValues::parse("a = 1\na = 2\n", "x.cfg").is_err());
        let kv = KeyValues::parse("a = 1\nb = 2\n", "x.cfg").unwrap();
        assert!(kv.reject_unknown(&["a"]).unwrap_err().to_string().contains("unknown key `b`"));
    }
}
