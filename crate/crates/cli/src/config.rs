//! Config file loading and the flags > file > defaults overlay.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Parsed `--config` file. Top-level tables: `env`, `train`, `experiment`,
/// `demo`, `serve`.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(Self { table })
    }

    pub fn section(&self, name: &str) -> Option<&toml::Value> {
        self.table.get(name)
    }

    /// `base` with the named section laid over it.
    pub fn apply<T: Serialize + DeserializeOwned>(&self, name: &str, base: &T) -> Result<T> {
        overlay(base, self.section(name)).with_context(|| format!("config section [{name}]"))
    }
}

fn merge(into: &mut toml::Value, patch: &toml::Value) {
    match (into, patch) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, v) in b {
                match a.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Serializes `base`, merges `patch` into it key by key and deserializes
/// the result; type errors in the file surface as errors.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&toml::Value>) -> Result<T> {
    let Some(patch) = patch else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let mut value = toml::Value::try_from(base)?;
    merge(&mut value, patch);
    Ok(value.try_into()?)
}

/// Writes the effective configuration next to a command's outputs.
pub fn echo_config<T: Serialize>(dir: &Path, config: &T) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    // TOML has no null: unset optional values are left out.
    let mut value = serde_json::to_value(config)?;
    strip_nulls(&mut value);
    let text = toml::to_string_pretty(&value)?;
    let path = dir.join("config.toml");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn strip_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|_, x| !x.is_null());
            map.values_mut().for_each(strip_nulls);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}
