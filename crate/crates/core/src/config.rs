//! `key = value` run configuration covering every model and training field.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Model and training settings, starting from the defaults and overridden by
/// a config file and then by command-line flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Splits config text into `(line, key, value)` entries. Blank lines and
/// `#` comments are skipped; a key may appear only once.
pub fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let key = key.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("duplicate key {key:?}"),
            });
        }
        out.push((idx + 1, key, value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        ModelConfig::KEYS.into_iter().chain(TrainConfig::KEYS)
    }

    /// Sets one field; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key {key:?}")))
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, key, value) in parse_entries(text)? {
            self.set(&key, &value).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.model
            .to_pairs()
            .into_iter()
            .chain(self.train.to_pairs())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
