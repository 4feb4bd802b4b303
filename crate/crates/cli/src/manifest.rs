use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Record of one invocation, written beside its output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    /// Input path → sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

pub struct Recorder {
    command: &'static str,
    started: Instant,
    config: Value,
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Recorder {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            config: Value::Null,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn config(&mut self, config: impl Serialize) {
        self.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Writes the manifest to `explicit`, else beside the first output, else
    /// to stderr so stdout keeps only data.
    pub fn finish(self, explicit: Option<&Path>) -> Result<()> {
        let target = explicit.map(Path::to_path_buf).or_else(|| {
            self.outputs.first().map(|p| {
                let mut s = p.clone().into_os_string();
                s.push(".manifest.json");
                PathBuf::from(s)
            })
        });
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        match target {
            Some(path) => {
                fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))
            }
            None => {
                eprintln!("manifest: {}", serde_json::to_string(&manifest)?);
                Ok(())
            }
        }
    }
}
