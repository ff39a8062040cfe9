//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! seed = 3
//! [train]
//! iterations = 50000     # becomes the key "train.iterations"
//! ```
//!
//! Values are read through typed accessors that record every resolved
//! value, defaults included. Keys nobody asked for are errors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    value: String,
    /// `None` for command-line overrides.
    line: Option<usize>,
}

#[derive(Debug, Default)]
pub struct RunConfig {
    entries: BTreeMap<String, Entry>,
    used: BTreeSet<String>,
    resolved: BTreeMap<String, String>,
    source: String,
}

fn is_key(s: &str) -> bool {
    !s.is_empty() && s.split('.').all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig { source: source.to_string(), ..Default::default() };
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| is_key(n))
                    .ok_or_else(|| Error::Config(format!("{source}:{line_no}: malformed section header {line:?}")))?;
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{line_no}: expected `key = value`, found {line:?}")))?;
            let k = k.trim();
            if !is_key(k) {
                return Err(Error::Config(format!("{source}:{line_no}: invalid key {k:?}")));
            }
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            let entry = Entry { value: v.trim().to_string(), line: Some(line_no) };
            if let Some(prev) = cfg.entries.insert(key.clone(), entry) {
                return Err(Error::Config(format!(
                    "{source}:{line_no}: duplicate key {key} (first set on line {})",
                    prev.line.unwrap_or(0)
                )));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
        let k = k.trim();
        if !is_key(k) {
            return Err(Error::Config(format!("override has invalid key {k:?}")));
        }
        self.entries.insert(k.to_string(), Entry { value: v.trim().to_string(), line: None });
        Ok(())
    }

    fn location(&self, key: &str) -> String {
        match self.entries.get(key).and_then(|e| e.line) {
            Some(line) => format!("{}:{line}", self.source),
            None => "--set".to_string(),
        }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.entries.get(key).map(|e| e.value.clone())
    }

    fn parse_value<T: FromStr>(&self, key: &str, value: &str) -> Result<T>
    where
        T::Err: Display,
    {
        value
            .parse()
            .map_err(|e| Error::Config(format!("{}: bad value {value:?} for {key}: {e}", self.location(key))))
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = match self.raw(key) {
            Some(s) => self.parse_value(key, &s)?,
            None => default,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn require<T: FromStr + Display>(&mut self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let s = self.raw(key).ok_or_else(|| Error::Config(format!("missing required key {key}")))?;
        if s.is_empty() {
            return Err(Error::Config(format!("{}: {key} is empty", self.location(key))));
        }
        let v: T = self.parse_value(key, &s)?;
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Optional value with no default; recorded only when present.
    pub fn optional<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            Some(s) if !s.is_empty() => {
                let v: T = self.parse_value(key, &s)?;
                self.resolved.insert(key.to_string(), v.to_string());
                Ok(Some(v))
            }
            _ => Ok(None),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr + Display>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T::Err: Display,
        T: Clone,
    {
        let v = match self.raw(key) {
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| self.parse_value(key, p))
                .collect::<Result<Vec<T>>>()?,
            None => default.to_vec(),
        };
        if v.is_empty() {
            return Err(Error::Config(format!("{}: {key} must list at least one value", self.location(key))));
        }
        let text: Vec<String> = v.iter().map(ToString::to_string).collect();
        self.resolved.insert(key.to_string(), text.join(", "));
        Ok(v)
    }

    /// Fails on any key that no accessor asked for.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<String> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(|k| format!("{k} ({})", self.location(k)))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    /// Every resolved value in config syntax, grouped by section.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let mut sections: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
        for (k, v) in &self.resolved {
            let (sec, name) = k.rsplit_once('.').unwrap_or(("", k));
            sections.entry(sec).or_default().push((name, v));
        }
        for (sec, items) in sections {
            if !sec.is_empty() {
                out.push_str(&format!("\n[{sec}]\n"));
            }
            for (k, v) in items {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out.trim_start().to_string()
    }
}
