//! Flat key=value configuration files.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! skipped. Every key must be consumed by the command that loads the file;
//! leftovers are hard errors so typos cannot silently fall back to
//! defaults. Precedence is flags over file over built-in defaults: callers
//! load the file, overlay `--set` pairs, then let dedicated flags win.

use std::collections::BTreeMap;
use std::path::Path;

use despeckle_core::{Error, Result};

#[derive(Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn empty() -> Self {
        KeyValues::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parameter(format!(
                    "{}:{}: expected key = value, got '{line}'",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::parameter(format!(
                    "{}:{}: empty key",
                    path.display(),
                    lineno + 1
                )));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::parameter(format!(
                    "{}:{}: duplicate key '{key}'",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(KeyValues { entries })
    }

    /// Overlays `key=value` pairs from repeated `--set` flags.
    pub fn apply_set(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(Error::parameter(format!(
                    "--set expects key=value, got '{pair}'"
                )));
            };
            self.entries
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::parameter(format!("{key}: expected a number, got '{v}'")))
            })
            .transpose()
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take(key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| {
                    Error::parameter(format!("{key}: expected an integer, got '{v}'"))
                })
            })
            .transpose()
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take(key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| {
                    Error::parameter(format!("{key}: expected an integer, got '{v}'"))
                })
            })
            .transpose()
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.take(key)
            .map(|v| match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::parameter(format!(
                    "{key}: expected true or false, got '{v}'"
                ))),
            })
            .transpose()
    }

    /// Comma-separated list of floats.
    pub fn take_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.take(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        let item = item.trim();
                        item.parse::<f64>().map_err(|_| {
                            Error::parameter(format!(
                                "{key}: expected a number list, got '{item}'"
                            ))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    /// Comma-separated list of nonempty strings.
    pub fn take_str_list(&mut self, key: &str) -> Result<Option<Vec<String>>> {
        self.take(key)
            .map(|v| {
                let items: Vec<String> = v
                    .split(',')
                    .map(|item| item.trim().to_string())
                    .filter(|item| !item.is_empty())
                    .collect();
                if items.is_empty() {
                    return Err(Error::parameter(format!("{key}: empty list")));
                }
                Ok(items)
            })
            .transpose()
    }

    /// Removes and returns every `prefix<suffix>` key, sorted by suffix.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let value = self.entries.remove(&k).unwrap();
                (k[prefix.len()..].to_string(), value)
            })
            .collect()
    }

    /// Errors if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        Err(Error::parameter(format!(
            "unknown configuration keys: {}",
            keys.join(", ")
        )))
    }
}
