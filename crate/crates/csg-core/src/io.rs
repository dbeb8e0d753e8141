//! Flat key-value config text and atomic file writes.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Insertion-ordered `key = value` map used for config files, dataset
/// headers, and checkpoint config blocks. Output is stable line for line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut kv = KvMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("line {}: expected key = value, got {raw:?}", lineno + 1));
            };
            kv.set_str(key.trim(), value.trim());
        }
        Ok(kv)
    }

    pub fn set_str(&mut self, key: &str, value: &str) {
        if let Some(e) = self.entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value.to_string();
        } else {
            self.entries.push((key.to_string(), value.to_string()));
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.set_str(key, &value.to_string());
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

    /// Typed lookup; absent keys fall back to `default`, present-but-bad
    /// values are an error.
    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, String>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get_str(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|e| format!("key {key}: cannot parse {s:?}: {e}")),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

impl Display for KvMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Writes via a temp file in the target directory plus rename, so an
/// interrupted run never leaves a truncated artifact behind.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> std::io::Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn atomic_write_str(path: impl AsRef<Path>, text: &str) -> std::io::Result<()> {
    atomic_write(path, text.as_bytes())
}
