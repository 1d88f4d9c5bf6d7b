use std::path::Path;

use serde::{Deserialize, Serialize};
use shellnet::network::{NetworkConfig, Preset, Task};
use shellnet::training::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            network: NetworkConfig::classification(),
            train: TrainConfig::default(),
        }
    }
}

/// Command-line knobs shared by every command that builds a network.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// TOML file with `precision`, `[network]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Sampling preset A, B, C or D.
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Sets both the training seed and the initialization seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one key, e.g. `--set train.epochs=5` or `--set network.shell_size=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// File, then preset, then `--set` overrides, then `--seed`.
    pub fn resolve(&self, task: Option<Task>) -> Result<RunConfig, CliError> {
        let mut value = match &self.config {
            Some(path) => read_table(path)?,
            None => {
                let mut base = RunConfig::default();
                if task == Some(Task::Segmentation) {
                    base.network = NetworkConfig::segmentation();
                }
                toml::Value::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?
            }
        };
        // parse the file once on its own so unknown keys are reported against it
        let mut cfg: RunConfig = value
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        if let Some(p) = self.preset {
            cfg.network = cfg.network.with_preset(p);
            value = toml::Value::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        }
        for item in &self.overrides {
            apply_override(&mut value, item)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.network.init_seed = seed;
        }
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn read_table(path: &Path) -> Result<toml::Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

/// Applies `a.b.c=value`. The value is read as TOML when it parses, as a bare
/// string otherwise. Every path component must already exist.
pub fn apply_override(root: &mut toml::Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {item:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let parsed = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let unknown = || CliError::Config(format!("unknown configuration key {key:?}"));
        node = match node {
            toml::Value::Table(t) => t.get_mut(*part).ok_or_else(unknown)?,
            toml::Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| unknown())?;
                a.get_mut(idx).ok_or_else(unknown)?
            }
            _ => return Err(unknown()),
        };
        if i == parts.len() - 1 {
            *node = parsed;
            return Ok(());
        }
    }
    Err(CliError::Config("empty override key".into()))
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("configuration serializes")
}
