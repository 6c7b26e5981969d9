//! Plain `key=value` text documents: manifests, config snapshots and metric
//! summaries all use this format.

use std::fmt::{self, Display};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: Vec<(String, String)>,
    source: Option<PathBuf>,
}

impl KvDoc {
    pub fn new() -> Self {
        KvDoc::default()
    }

    /// Parses `key=value` lines. Blank lines and lines starting with `#`
    /// are skipped; whitespace around keys and values is trimmed.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut doc = KvDoc {
            entries: Vec::new(),
            source: Some(source.to_path_buf()),
        };
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                let Some((k, v)) = trimmed.split_once('=') else {
                    return Err(Error::format(
                        source,
                        offset,
                        format!("expected key=value, got {trimmed:?}"),
                    ));
                };
                let k = k.trim();
                if k.is_empty() {
                    return Err(Error::format(source, offset, "empty key"));
                }
                if doc.get(k).is_some() {
                    return Err(Error::format(
                        source,
                        offset,
                        format!("duplicate key {k:?}"),
                    ));
                }
                doc.entries.push((k.to_string(), v.trim().to_string()));
            }
            offset += line.len() as u64;
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvDoc::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    /// Inserts or replaces, keeping first-insertion order.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    fn source(&self) -> PathBuf {
        self.source
            .clone()
            .unwrap_or_else(|| PathBuf::from("<memory>"))
    }

    fn offset_of(&self, key: &str) -> u64 {
        // Best effort: position among entries; exact offsets are only known while parsing.
        self.entries.iter().position(|(k, _)| k == key).unwrap_or(0) as u64
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(self.source(), 0, format!("missing key {key:?}")))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e: T::Err| {
            Error::format(
                self.source(),
                self.offset_of(key),
                format!("bad value for {key}: {raw:?} ({e})"),
            )
        })
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.parse_value(key).map(Some),
        }
    }
}

impl Display for KvDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Comma-separated list, e.g. `256,256,256`.
pub fn format_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, T::Err> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| s.trim().parse()).collect()
}
