//! Pipeline configuration: defaults, file loading (TOML or JSON), and
//! command-line override layering.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::projection::ProjectionConfig;
use crate::stitch::CellSize;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("malformed config {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("config {path} must end in .toml or .json")]
    UnknownFormat { path: String },
}

/// Which VLM backend a run talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Canned responses from a script file (deterministic runs and tests).
    Scripted,
    /// Chat-completions HTTP endpoint.
    Http,
    /// Benchmark oracle that answers every retrieval request perfectly.
    Echo,
}

/// VLM backend selection and request parameters. Credentials are referenced
/// by environment-variable name only and never stored in files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Chat-completions base URL (the client appends /chat/completions).
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    /// Response script for the scripted backend.
    pub script: Option<PathBuf>,
    /// HTTP request timeout in seconds.
    pub timeout_s: u64,
    /// Optional per-request image cap declared by the deployment.
    pub max_images: Option<usize>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: None,
            temperature: 0.1,
            top_p: 0.3,
            script: None,
            timeout_s: 120,
            max_images: None,
        }
    }
}

/// Where detector/segmenter/matcher answers come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptionKind {
    /// Fixture files under `<fixtures>/<scene_id>/`.
    Fixture,
    /// HTTP detector/segmenter services.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub kind: PerceptionKind,
    /// Fixture root holding one subdirectory per scene.
    pub fixtures: Option<PathBuf>,
    /// Base URL for HTTP perception services.
    pub base_url: String,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            kind: PerceptionKind::Fixture,
            fixtures: None,
            base_url: "http://localhost:8001".into(),
        }
    }
}

/// Full pipeline configuration. Field names are the config-file keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Retry budget M for the grounding loop.
    pub retry_limit: u32,
    /// Soft limit L on stitched images per request.
    pub soft_limit: usize,
    /// Keep one frame from every `frame_stride` frames.
    pub frame_stride: usize,
    /// Minimum detection score for preselection and candidates.
    pub detection_threshold: f64,
    /// Grid cell size for stitched composites.
    pub cell: CellSize,
    /// Depth raster value that equals one meter.
    pub depth_divisor: f64,
    /// Ensemble projection parameters (includes the image count N).
    pub projection: ProjectionConfig,
    pub backend: BackendConfig,
    pub perception: PerceptionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retry_limit: 3,
            soft_limit: 6,
            frame_stride: 20,
            detection_threshold: 0.30,
            cell: CellSize::default(),
            depth_divisor: 1000.0,
            projection: ProjectionConfig::default(),
            backend: BackendConfig::default(),
            perception: PerceptionConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// The agent-facing slice of this configuration.
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            retry_limit: self.retry_limit,
            soft_limit: self.soft_limit,
            cell: self.cell,
            detection_threshold: self.detection_threshold,
        }
    }
}

/// Loads a config file, choosing the parser by extension.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let parse_err = |detail: String| ConfigError::Parse {
        path: path.display().to_string(),
        detail,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| parse_err(e.to_string())),
        Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string())),
        _ => Err(ConfigError::UnknownFormat {
            path: path.display().to_string(),
        }),
    }
}

/// Command-line overrides: every field beats the config file, which beats
/// the defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub retry_limit: Option<u32>,
    pub soft_limit: Option<usize>,
    pub frame_stride: Option<usize>,
    pub detection_threshold: Option<f64>,
    pub script: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
}

/// Resolves the effective configuration: defaults, then the file (if any),
/// then command-line overrides.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = match file {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = overrides.retry_limit {
        cfg.retry_limit = v;
    }
    if let Some(v) = overrides.soft_limit {
        cfg.soft_limit = v;
    }
    if let Some(v) = overrides.frame_stride {
        cfg.frame_stride = v;
    }
    if let Some(v) = overrides.detection_threshold {
        cfg.detection_threshold = v;
    }
    if let Some(v) = &overrides.script {
        cfg.backend.kind = BackendKind::Scripted;
        cfg.backend.script = Some(v.clone());
    }
    if let Some(v) = &overrides.fixtures {
        cfg.perception.kind = PerceptionKind::Fixture;
        cfg.perception.fixtures = Some(v.clone());
    }
    Ok(cfg)
}
