//! JSON configuration documents.

use std::fs;
use std::path::Path;

use phrc_core::control::ControllerConfig;
use phrc_core::intent::TrainOptions;
use phrc_core::nn::NetConfig;
use phrc_core::sim::Scenario;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Controller configuration from a file, or the defaults.
pub fn controller_config(path: Option<&Path>) -> Result<ControllerConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => ControllerConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A scenario given either as a preset name (`free`, `standard`,
/// `standard-<seed>`) or as a path to a JSON file.
pub fn scenario(spec: &str) -> Result<Scenario> {
    if let Some(s) = Scenario::preset(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    let looks_like_file = path.extension().is_some() || spec.contains(std::path::MAIN_SEPARATOR);
    if !looks_like_file && !path.exists() {
        return Err(Error::Usage(format!(
            "unknown scenario `{spec}` (presets: free, standard, standard-<seed>; or a JSON file)"
        )));
    }
    let s: Scenario = read_json(path)?;
    s.validate()?;
    Ok(s)
}

/// Everything `train` needs besides the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub obs_len: usize,
    pub fut_len: usize,
    /// Step between consecutive training windows of a trajectory.
    pub stride: usize,
    pub train: TrainOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            obs_len: 8,
            fut_len: 12,
            stride: 1,
            train: TrainOptions::default(),
        }
    }
}
