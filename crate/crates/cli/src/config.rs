use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use okt_core::kb::DEFAULT_WINDOW;
use okt_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Knowledge,
    Vanilla,
}

/// Everything `train` needs; the JSON config file mirrors this shape and may
/// set any subset of it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: usize,
    pub backbone: BackboneKind,
    /// Classes or choices; inferred from the data when absent.
    pub num_labels: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            window: DEFAULT_WINDOW,
            backbone: BackboneKind::Knowledge,
            num_labels: None,
        }
    }
}

/// Recursively writes `over` onto `base`. Keys unknown to `base` are errors so
/// typos in a config file do not pass silently.
fn overlay(base: &mut Value, over: &Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() => overlay(slot, v, &path)?,
                    Some(slot) => *slot = v.clone(),
                    None => bail!("unknown config key `{path}`"),
                }
            }
            Ok(())
        }
        (_, _) => bail!("config `{at}` must be a JSON object"),
    }
}

impl RunConfig {
    /// Defaults overlaid with the file at `path`, if any. Flags are applied by
    /// the caller afterwards.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let file: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            overlay(&mut value, &file, "")
                .with_context(|| format!("in config {}", path.display()))?;
        }
        serde_json::from_value(value).context("config does not match the schema")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults_and_keep_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            r#"{"model": {"hidden": 8}, "train": {"lr": 0.001}, "backbone": "vanilla"}"#,
        )
        .unwrap();
        let c = RunConfig::resolve(Some(&p)).unwrap();
        assert_eq!(c.model.hidden, 8);
        assert_eq!(c.model.layers, ModelConfig::default().layers);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.backbone, BackboneKind::Vanilla);
        assert_eq!(c.window, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
        let err = format!("{:#}", RunConfig::resolve(Some(&p)).unwrap_err());
        assert!(err.contains("train.learning_rate"), "{err}");
    }

    #[test]
    fn defaults_are_the_paper_values() {
        let c = RunConfig::resolve(None).unwrap();
        assert_eq!(c.train.lr, 5e-6);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.window, 5);
    }
}
