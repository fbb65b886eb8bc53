//! `key = value` text files with `include` support.
//!
//! ```text
//! # comment
//! include = base.cfg
//! epochs = 20
//! ```
//!
//! An `include` line splices in another file (relative paths resolve
//! against the including file); later assignments override earlier ones.
//! Keys are case-sensitive. Malformed lines are collected and reported
//! together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: String,
    /// `file:line` of the assignment that won.
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvConfig {
    entries: BTreeMap<String, Entry>,
}

impl KvConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        let mut stack = Vec::new();
        cfg.load_into(path, &mut stack, &mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Parses `text` as if read from a file in `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        let mut stack = Vec::new();
        cfg.parse_into(text, "<string>", base_dir, &mut stack, &mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    fn load_into(&mut self, path: &Path, stack: &mut Vec<PathBuf>, errors: &mut Vec<String>) {
        let canonical = path.canonicalize().unwrap_or_else(|_| path.to_path_buf());
        if stack.contains(&canonical) {
            errors.push(format!("{}: include cycle", path.display()));
            return;
        }
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                errors.push(format!("{}: {e}", path.display()));
                return;
            }
        };
        stack.push(canonical);
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        self.parse_into(&text, &path.display().to_string(), &dir, stack, errors);
        stack.pop();
    }

    fn parse_into(
        &mut self,
        text: &str,
        name: &str,
        dir: &Path,
        stack: &mut Vec<PathBuf>,
        errors: &mut Vec<String>,
    ) {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let origin = format!("{name}:{}", i + 1);
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("{origin}: expected `key = value`"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                errors.push(format!("{origin}: empty key"));
            } else if key == "include" {
                self.load_into(&dir.join(value), stack, errors);
            } else {
                self.entries.insert(
                    key.to_string(),
                    Entry {
                        value: value.to_string(),
                        origin,
                    },
                );
            }
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>, origin: &str) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.into(),
                origin: origin.to_string(),
            },
        );
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present, pushing a message onto `errors` when the
    /// value does not parse.
    pub fn parsed<V: FromStr>(&self, key: &str, errors: &mut Vec<String>) -> Option<V> {
        let entry = self.entries.get(key)?;
        match entry.value.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                errors.push(format!("{}: invalid value {:?} for `{key}`", entry.origin, entry.value));
                None
            }
        }
    }

    /// A path value resolved against the directory of the file that set it.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let entry = self.entries.get(key)?;
        let file = entry.origin.rsplit_once(':').map_or("", |(f, _)| f);
        let base = if file.starts_with('<') {
            PathBuf::new()
        } else {
            Path::new(file).parent().map(Path::to_path_buf).unwrap_or_default()
        };
        Some(base.join(&entry.value))
    }
}
