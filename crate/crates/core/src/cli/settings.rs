//! Configuration resolution: command-line flags, then environment
//! variables, then the config file, then built-in defaults.
//!
//! The config file is flat TOML with dotted section names, for example
//!
//! ```toml
//! global.seed = 3
//! align.beta = 0.01
//! align.updates = 350
//! ```
//!
//! Only `output_dir` and `threads` can be overridden from the environment
//! (`PREFALIGN_OUTPUT_DIR`, `PREFALIGN_THREADS`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

pub const ENV_OUTPUT_DIR: &str = "PREFALIGN_OUTPUT_DIR";
pub const ENV_THREADS: &str = "PREFALIGN_THREADS";

/// Flattened `section.key -> value` view of a config file.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

impl Settings {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::parse(origin, e.to_string()))?;
        let mut values = BTreeMap::new();
        flatten("", &table, &mut values);
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::parse(&text, path)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Value of `key` from the file, if present.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        let Some(v) = self.values.get(key) else {
            return Ok(None);
        };
        match v.clone().try_into::<T>() {
            Ok(t) => Ok(Some(t)),
            // Let integer literals stand in for floats.
            Err(e) => match v {
                toml::Value::Integer(i) => toml::Value::Float(*i as f64)
                    .try_into::<T>()
                    .map(Some)
                    .map_err(|_| Error::config(key, e.to_string())),
                _ => Err(Error::config(key, e.to_string())),
            },
        }
    }

    /// `flag`, else the file value of `key`, else `default`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    /// `flag`, else the environment variable, else the file, else default.
    pub fn pick_env<T: DeserializeOwned + std::str::FromStr>(
        &self,
        flag: Option<T>,
        env: &str,
        key: &str,
        default: T,
    ) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Ok(raw) = std::env::var(env) {
            return raw
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse {env}={raw:?}")));
        }
        self.pick(None, key, default)
    }
}
