//! `key=value` run configuration shared by the config file and CLI flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ognet::model::{OgNetConfig, Variant};
use ognet::training::TrainConfig;

/// Keys consumed by the command itself rather than the model or trainer.
pub const RUN_KEYS: [&str; 3] = ["manifest", "out", "threads"];

/// Ordered key=value pairs; later entries override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected key=value, got {raw:?}", n + 1);
            };
            s.set(k.trim(), v.trim());
        }
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Splits the settings into model and trainer configurations. The point
    /// schedule is scaled to `input_points` unless given explicitly.
    pub fn build(&self, num_classes: usize, input_points: usize) -> Result<(OgNetConfig, TrainConfig)> {
        let variant: Variant = self.get("variant").unwrap_or("ogn").parse()?;
        let mut model = OgNetConfig::new(variant, num_classes);
        if input_points < 4096 {
            model = model.scaled_points(input_points);
        }
        let mut train = TrainConfig::default();
        for (k, v) in &self.values {
            if k == "variant" || RUN_KEYS.contains(&k.as_str()) {
                continue;
            }
            if !train.set(k, v)? {
                model.set(k, v)?;
            }
        }
        model.num_classes = num_classes;
        model.validate()?;
        train.validate()?;
        Ok((model, train))
    }
}
