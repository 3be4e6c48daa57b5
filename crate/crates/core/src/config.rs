//! Flat `dotted.key = value` configuration text.
//!
//! One entry per line, `#` starts a comment, values may be wrapped in double
//! quotes. Keys are kept sorted so serialization is canonical.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvDoc {
    entries: BTreeMap<String, Entry>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .split('.')
            .all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("invalid key `{key}`"),
                });
            }
            let value = unquote(value.trim());
            if entries.insert(key.to_string(), Entry { value, line }).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KvDoc { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        debug_assert!(valid_key(key), "bad key {key}");
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line: 0,
            },
        );
    }

    /// Apply `key=value` overrides on top of this document.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for (n, item) in overrides.into_iter().enumerate() {
            let (key, value) = item.split_once('=').ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("override #{} `{item}` is not `key=value`", n + 1),
            })?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("invalid key `{key}` in override"),
                });
            }
            self.set(key, unquote(value.trim()));
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.get_str(key).ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing key `{key}`"),
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| self.bad_value(key, &e.value)),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("missing key `{key}`"),
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn bad_value(&self, key: &str, value: &str) -> Error {
        Error::Parse {
            line: self.entries.get(key).map_or(0, |e| e.line),
            msg: format!("invalid value `{value}` for key `{key}`"),
        }
    }

    /// Error on the first key not matched by any of `known` (exact keys or
    /// prefixes ending in `.`).
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (key, e) in &self.entries {
            let ok = known
                .iter()
                .any(|k| if k.ends_with('.') { key.starts_with(k) } else { key == k });
            if !ok {
                return Err(Error::Parse {
                    line: e.line,
                    msg: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> String {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
        .to_string()
}

fn needs_quotes(v: &str) -> bool {
    v.is_empty() || v.contains('#') || v.trim() != v
}

impl fmt::Display for KvDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, e) in &self.entries {
            if needs_quotes(&e.value) {
                writeln!(f, "{k} = \"{}\"", e.value)?;
            } else {
                writeln!(f, "{k} = {}", e.value)?;
            }
        }
        Ok(())
    }
}
