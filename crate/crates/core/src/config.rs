//! Plain-text `key = value` configuration files.
//!
//! Lines starting with `#` and blank lines are ignored. Values keep their
//! source line so that type errors can point back at the offending line.
//! Entries may be overridden from the environment or the command line; the
//! digest is computed over the resolved entries and ignores where a value
//! came from.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    File { path: String, line: usize },
    Env(String),
    Flag(String),
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    origin: Origin,
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInputs(vec![path.to_path_buf()]));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let origin = Origin::File {
                path: source.to_string(),
                line: i + 1,
            };
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_error(&origin, "expected `key = value`"));
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(config_error(&origin, format!("invalid key `{key}`")));
            }
            let value = value.split(" #").next().unwrap_or("").trim();
            if cfg.entries.contains_key(key) {
                return Err(config_error(&origin, format!("duplicate key `{key}`")));
            }
            cfg.entries.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    origin,
                },
            );
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>, origin: Origin) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.into(),
                origin,
            },
        );
    }

    /// Environment name of `key` under `prefix`: upper case with `.` and `-`
    /// turned into `_`, so `sim.ncols` becomes `U5MR_SIM_NCOLS`.
    pub fn env_name(prefix: &str, key: &str) -> String {
        format!("{prefix}_{}", key.to_ascii_uppercase().replace(['.', '-'], "_"))
    }

    /// Overrides each of `known` whose [`Config::env_name`] appears in `vars`.
    pub fn apply_env_keys<I>(&mut self, prefix: &str, vars: I, known: &[&str])
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let names: BTreeMap<String, &str> = known.iter().map(|k| (Self::env_name(prefix, k), *k)).collect();
        for (name, value) in vars {
            if let Some(key) = names.get(&name) {
                self.set(key, value, Origin::Env(name.clone()));
            }
        }
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

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| {
                config_error(&e.origin, format!("`{key}`: cannot parse `{}`: {err}", e.value))
            }),
        }
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list; empty string gives an empty list.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        if e.value.trim().is_empty() {
            return Ok(Some(Vec::new()));
        }
        e.value
            .split(',')
            .map(|part| {
                part.trim().parse::<T>().map_err(|err| {
                    config_error(&e.origin, format!("`{key}`: cannot parse `{}`: {err}", part.trim()))
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Error anchored at the location of `key`, for semantic checks done by
    /// the caller after parsing.
    pub fn invalid(&self, key: &str, message: impl Into<String>) -> Error {
        match self.entries.get(key) {
            Some(e) => config_error(&e.origin, format!("`{key}`: {}", message.into())),
            None => Error::Config {
                path: "<defaults>".into(),
                line: 0,
                message: format!("`{key}`: {}", message.into()),
            },
        }
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (key, e) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(config_error(&e.origin, format!("unknown key `{key}`")));
            }
        }
        Ok(())
    }

    /// Canonical `key=value` lines in key order.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, e) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(&e.value);
            out.push('\n');
        }
        out
    }

    /// SHA-256 of [`Config::canonical`], hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

fn config_error(origin: &Origin, message: impl Into<String>) -> Error {
    let (path, line) = match origin {
        Origin::File { path, line } => (path.clone(), *line),
        Origin::Env(name) => (format!("env:{name}"), 0),
        Origin::Flag(name) => (format!("flag:--{name}"), 0),
    };
    Error::Config {
        path,
        line,
        message: message.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let cfg = Config::parse("# header\n\nnx = 20\nname = demo  # trailing\nlist = 1, 2,3\n", "t.cfg").unwrap();
        assert_eq!(cfg.get::<usize>("nx").unwrap(), Some(20));
        assert_eq!(cfg.get_str("name"), Some("demo"));
        assert_eq!(cfg.get_list::<u32>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(cfg.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = Config::parse("a = 1\nbroken line\n", "x.cfg").unwrap_err();
        match err {
            Error::Config { line, path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, "x.cfg");
            }
            other => panic!("unexpected {other:?}"),
        }
        let cfg = Config::parse("a = 1\nb = notanumber\n", "x.cfg").unwrap();
        match cfg.get::<f64>("b").unwrap_err() {
            Error::Config { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn env_overrides_and_digest() {
        let mut cfg = Config::parse("seed = 1\ngrid.nx = 10\n", "c").unwrap();
        let before = cfg.digest();
        let vars = vec![
            ("U5MR_GRID_NX".to_string(), "12".to_string()),
            ("U5MR_SEED_X".into(), "3".into()),
            ("OTHER".into(), "x".into()),
        ];
        cfg.apply_env_keys("U5MR", vars, &["seed", "grid.nx"]);
        assert_eq!(cfg.get::<u32>("grid.nx").unwrap(), Some(12));
        assert_eq!(cfg.get::<u32>("seed").unwrap(), Some(1));
        assert_eq!(Config::env_name("U5MR", "grid.nx"), "U5MR_GRID_NX");
        assert_ne!(before, cfg.digest());
        let same = Config::parse("grid.nx = 12\nseed = 1\n", "d").unwrap();
        assert_eq!(same.digest(), cfg.digest());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(Config::parse("a = 1\na = 2\n", "c").is_err());
        let cfg = Config::parse("a = 1\nzz = 2\n", "c").unwrap();
        assert!(cfg.check_known(&["a"]).is_err());
        assert!(cfg.check_known(&["a", "zz"]).is_ok());
    }
}
