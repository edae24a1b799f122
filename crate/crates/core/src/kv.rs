//! Flat `key = value` text: one assignment per line, `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed assignments keyed by name, remembering the source line of each.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.insert(key.to_string(), (i + 1, v.trim().to_string())).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(KvMap {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on the first key not in `allowed`.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "{}:{line}: unknown key `{k}`",
                    self.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Typed lookup; a value that does not parse is a config error naming the
    /// expected type.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some((line, v)) = self.entries.get(key) else {
            return Ok(None);
        };
        v.parse::<T>().map(Some).map_err(|_| {
            Error::Config(format!(
                "{}:{line}: `{key}` expects {}, found `{v}`",
                self.path.display(),
                type_label::<T>()
            ))
        })
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Format(format!("missing key `{key}` in {}", self.path.display())))
    }
}

fn type_label<T>() -> &'static str {
    let name = std::any::type_name::<T>();
    match name {
        "usize" | "u64" | "u32" => "a non-negative integer",
        "f32" | "f64" => "a number",
        "bool" => "true or false",
        _ => name.rsplit("::").next().unwrap_or(name),
    }
}

/// Accumulates `key = value` lines.
#[derive(Clone, Debug, Default)]
pub struct KvWriter(String);

impl KvWriter {
    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.0.push_str(key);
        self.0.push_str(" = ");
        self.0.push_str(&value.to_string());
        self.0.push('\n');
        self
    }

    pub fn finish(self) -> String {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let m = KvMap::parse("# header\n\nn_memory = 64 # inline\nname=x\n", Path::new("c")).unwrap();
        assert_eq!(m.get::<usize>("n_memory").unwrap(), Some(64));
        assert_eq!(m.raw("name"), Some("x"));
        assert_eq!(m.get::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn errors() {
        assert!(matches!(KvMap::parse("junk\n", Path::new("c")), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(KvMap::parse("a=1\na=2\n", Path::new("c")), Err(Error::Parse { line: 2, .. })));
        let m = KvMap::parse("steps = ten\nbogus = 1\n", Path::new("c")).unwrap();
        let e = m.get::<usize>("steps").unwrap_err().to_string();
        assert!(e.contains("non-negative integer"), "{e}");
        let e = m.reject_unknown(&["steps"]).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }

    #[test]
    fn floats_round_trip_through_display() {
        let mut w = KvWriter::default();
        w.put("x", 0.1f64 + 0.2).put("y", 1e-8f32);
        let m = KvMap::parse(&w.finish(), Path::new("c")).unwrap();
        assert_eq!(m.require::<f64>("x").unwrap(), 0.1 + 0.2);
        assert_eq!(m.require::<f32>("y").unwrap(), 1e-8);
    }
}
