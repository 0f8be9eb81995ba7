//! Sectioned `key = value` text.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment            (full line, or after whitespace at the end of a line)
//! [section.name]       (letters, digits, '_', '-', '.')
//! key = value          (key: letters, digits, '_', '-')
//! ```
//!
//! Keys that appear before the first section header belong to the root
//! section `""`. A key may appear once per section. Values are trimmed
//! strings; typed accessors parse them on demand and report the line.
//! Lists are comma separated.
//!
//! The same grammar is used for run configs, checkpoint and dataset
//! headers, and manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("duplicate key '{key}' in [{section}] at lines {first} and {second}")]
    Duplicate {
        section: String,
        key: String,
        first: usize,
        second: usize,
    },
    #[error("unknown key '{key}' in [{section}] at line {line}")]
    UnknownKey { section: String, key: String, line: usize },
    #[error("unknown section [{section}] at line {line}")]
    UnknownSection { section: String, line: usize },
    #[error("line {line}: key '{key}' in [{section}]: expected {expected}, got '{value}'")]
    Type {
        section: String,
        key: String,
        line: usize,
        expected: &'static str,
        value: String,
    },
    #[error("missing key '{key}' in [{section}]")]
    Missing { section: String, key: String },
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Clone, Default)]
pub struct KvDoc {
    sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

fn valid_name(s: &str, allow_dot: bool) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || (allow_dot && c == '.'))
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut doc = KvDoc::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let mut s = raw.trim();
            if let Some(pos) = s.find(" #").or_else(|| s.find("\t#")) {
                s = s[..pos].trim_end();
            }
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| KvError::Syntax {
                    line,
                    msg: "unterminated section header".into(),
                })?;
                let name = name.trim();
                if !valid_name(name, true) {
                    return Err(KvError::Syntax {
                        line,
                        msg: format!("invalid section name '{name}'"),
                    });
                }
                current = name.to_string();
                doc.sections
                    .entry(current.clone())
                    .or_insert_with(|| (line, BTreeMap::new()));
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| KvError::Syntax {
                line,
                msg: format!("expected 'key = value', got '{s}'"),
            })?;
            let key = k.trim();
            if !valid_name(key, false) {
                return Err(KvError::Syntax {
                    line,
                    msg: format!("invalid key '{key}'"),
                });
            }
            let section = doc
                .sections
                .entry(current.clone())
                .or_insert_with(|| (line, BTreeMap::new()));
            if let Some(prev) = section.1.get(key) {
                return Err(KvError::Duplicate {
                    section: current.clone(),
                    key: key.to_string(),
                    first: prev.line,
                    second: line,
                });
            }
            section.1.insert(
                key.to_string(),
                Entry {
                    value: v.trim().to_string(),
                    line,
                },
            );
        }
        Ok(doc)
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(|s| s.as_str())
    }

    /// Opens a section for strict reading. A missing section reads as empty.
    pub fn section<'a>(&'a self, name: &str) -> Section<'a> {
        Section {
            name: name.to_string(),
            entries: self.sections.get(name).map(|s| &s.1),
            used: BTreeSet::new(),
        }
    }

    /// Fails on any section not listed in `known`.
    pub fn check_sections(&self, known: &[&str]) -> Result<(), KvError> {
        for (name, (line, entries)) in &self.sections {
            if name.is_empty() && entries.is_empty() {
                continue;
            }
            if !known.contains(&name.as_str()) {
                return Err(KvError::UnknownSection {
                    section: name.clone(),
                    line: *line,
                });
            }
        }
        Ok(())
    }
}

pub struct Section<'a> {
    name: String,
    entries: Option<&'a BTreeMap<String, Entry>>,
    used: BTreeSet<String>,
}

impl<'a> Section<'a> {
    fn entry(&mut self, key: &str) -> Option<&'a Entry> {
        self.used.insert(key.to_string());
        self.entries.and_then(|e| e.get(key))
    }

    fn type_err(&self, key: &str, e: &Entry, expected: &'static str) -> KvError {
        KvError::Type {
            section: self.name.clone(),
            key: key.to_string(),
            line: e.line,
            expected,
            value: e.value.clone(),
        }
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.entry(key)
            .map(|e| e.value.clone())
            .unwrap_or_else(|| default.to_string())
    }

    pub fn opt_str(&mut self, key: &str) -> Option<String> {
        self.entry(key).map(|e| e.value.clone())
    }

    pub fn require_str(&mut self, key: &str) -> Result<String, KvError> {
        self.opt_str(key).ok_or_else(|| KvError::Missing {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    pub fn parse_or<T: FromStr>(&mut self, key: &str, default: T, expected: &'static str) -> Result<T, KvError> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| self.type_err(key, e, expected)),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str, expected: &'static str) -> Result<T, KvError> {
        match self.entry(key) {
            None => Err(KvError::Missing {
                section: self.name.clone(),
                key: key.to_string(),
            }),
            Some(e) => e.value.parse().map_err(|_| self.type_err(key, e, expected)),
        }
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, KvError> {
        self.parse_or(key, default, "unsigned integer")
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64, KvError> {
        self.parse_or(key, default, "unsigned integer")
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, KvError> {
        self.parse_or(key, default, "number")
    }

    /// A number, or `none` for an absent value.
    pub fn opt_f64_or(&mut self, key: &str, default: Option<f64>) -> Result<Option<f64>, KvError> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) if e.value == "none" => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| self.type_err(key, e, "number or none")),
        }
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, KvError> {
        self.parse_or(key, default, "true or false")
    }

    pub fn list_or<T: FromStr + Clone>(
        &mut self,
        key: &str,
        default: &[T],
        expected: &'static str,
    ) -> Result<Vec<T>, KvError> {
        match self.entry(key) {
            None => Ok(default.to_vec()),
            Some(e) => {
                if e.value.is_empty() {
                    return Ok(Vec::new());
                }
                e.value
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| self.type_err(key, e, expected)))
                    .collect()
            }
        }
    }

    /// Fails if the section holds keys that were never read.
    pub fn finish(self) -> Result<(), KvError> {
        if let Some(entries) = self.entries {
            for (k, e) in entries {
                if !self.used.contains(k) {
                    return Err(KvError::UnknownKey {
                        section: self.name.clone(),
                        key: k.clone(),
                        line: e.line,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Builds kv text. Sections are written in insertion order.
#[derive(Debug, Default, Clone)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        if !self.out.is_empty() {
            self.out.push('\n');
        }
        let _ = writeln!(self.out, "[{name}]");
        self
    }

    pub fn kv(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.out, "{key} = {value}");
        self
    }

    pub fn list<T: std::fmt::Display>(&mut self, key: &str, values: &[T]) -> &mut Self {
        let joined: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.kv(key, joined.join(", "))
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Formats an f64 so that parsing it back yields the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let doc = KvDoc::parse("seed = 3\n# c\n[a.b]\nx = 1.5  # trailing\ny = 1, 2,3\n").unwrap();
        let mut root = doc.section("");
        assert_eq!(root.u64_or("seed", 0).unwrap(), 3);
        root.finish().unwrap();
        let mut s = doc.section("a.b");
        assert_eq!(s.f64_or("x", 0.0).unwrap(), 1.5);
        assert_eq!(s.list_or::<u32>("y", &[], "list").unwrap(), vec![1, 2, 3]);
        s.finish().unwrap();
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let err = KvDoc::parse("[s]\nk = 1\n\nk = 2\n").unwrap_err();
        assert_eq!(
            err,
            KvError::Duplicate {
                section: "s".into(),
                key: "k".into(),
                first: 2,
                second: 4
            }
        );
        assert!(err.to_string().contains("'k'"));
    }

    #[test]
    fn syntax_error_has_line() {
        let err = KvDoc::parse("[s]\nnot a pair\n").unwrap_err();
        assert!(matches!(err, KvError::Syntax { line: 2, .. }));
        assert!(KvDoc::parse("[s\n").is_err());
    }

    #[test]
    fn unknown_key_and_type_mismatch() {
        let doc = KvDoc::parse("[s]\nk = x\nz = 1\n").unwrap();
        let mut s = doc.section("s");
        assert!(matches!(s.usize_or("k", 0), Err(KvError::Type { line: 2, .. })));
        assert!(matches!(s.finish(), Err(KvError::UnknownKey { line: 3, .. })));
    }

    #[test]
    fn f64_format_roundtrips() {
        for v in [0.1, -20.0, 1e-300, 0.2 + 0.1] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
