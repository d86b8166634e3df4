//! Sectioned run configuration read from TOML.
//!
//! Every section maps onto one settings struct; keys a struct does not know
//! are rejected, as are keys outside any section.

use std::path::Path;

use thiserror::Error;

use crate::eval::MatchConfig;
use crate::model::ModelConfig;
use crate::scene::SceneSpec;
use crate::train::{FeatureTrainConfig, PoseConfig, TrainConfig, TtoConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("[{section}] {message}")]
    Key { section: String, message: String },
    #[error("unknown section [{0}]")]
    Section(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which synthetic scenes a run uses and which rig views it holds out.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    /// Seed of the first scene; scene `i` uses `scene_seed + i`.
    pub scene_seed: u64,
    pub held_out: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 3,
            scene_seed: 0,
            held_out: 2,
        }
    }
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub input_views: usize,
    pub noise_std: f64,
    pub pairs_per_bin: usize,
    pub matching: MatchConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            input_views: 8,
            noise_std: 0.3,
            pairs_per_bin: 20,
            matching: MatchConfig::default(),
            seed: 0,
        }
    }
}

fn value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V, String> {
    v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
}

impl DataConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "scenes" => self.scenes = value(key, v)?,
            "scene_seed" => self.scene_seed = value(key, v)?,
            "held_out" => self.held_out = value(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

impl EvalConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "input_views" => self.input_views = value(key, v)?,
            "noise_std" => self.noise_std = value(key, v)?,
            "pairs_per_bin" => self.pairs_per_bin = value(key, v)?,
            "threshold_px" => self.matching.threshold_px = value(key, v)?,
            "top_k" => self.matching.top_k = value(key, v)?,
            "ratio" => self.matching.ratio = value(key, v)?,
            "mutual" => self.matching.mutual = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

/// All settings of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureTrainConfig,
    pub tto: TtoConfig,
    pub pose: PoseConfig,
    pub eval: EvalConfig,
}

pub const SECTIONS: [&str; 8] = ["data", "scene", "model", "train", "features", "tto", "pose", "eval"];

fn scalar_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Apply one setting addressed as `section`, `key`.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
        let res = match section {
            "data" => self.data.set(key, v),
            "scene" => self.scene.set(key, v).map_err(|e| e.to_string()),
            "model" => self.model.set(key, v).map_err(|e| e.to_string()),
            "train" => self.train.set(key, v).map_err(|e| e.to_string()),
            "features" => self.features.set(key, v).map_err(|e| e.to_string()),
            "tto" => self.tto.set(key, v).map_err(|e| e.to_string()),
            "pose" => self.pose.set(key, v).map_err(|e| e.to_string()),
            "eval" => self.eval.set(key, v),
            other => return Err(ConfigError::Section(other.to_string())),
        };
        res.map_err(|message| ConfigError::Key {
            section: section.to_string(),
            message,
        })
    }

    /// Apply a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (path, v) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax(format!("override `{spec}` is not `section.key=value`")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| ConfigError::Syntax(format!("override `{spec}` is not `section.key=value`")))?;
        self.set(section, key, v.trim())
    }

    /// Defaults overlaid with the sections of `text`.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (section, body) in &table {
            let toml::Value::Table(body) = body else {
                return Err(ConfigError::Syntax(format!("`{section}` must be a [section]")));
            };
            for (key, v) in body {
                cfg.set(section, key, &scalar_text(v))?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::parse(&text)
    }
}
