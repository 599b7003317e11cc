//! Pipeline configuration: one flat TOML file, `key=value` overrides and an
//! environment override for the adapter endpoint.
//!
//! ```toml
//! scene = "scene.ply"
//! cameras = "cameras.json"
//! mask_root = "masks"
//! frames = "frames"
//! workdir = "out"
//! entropy_threshold = 0.6
//! match_threshold = 0.8
//! adapter = "mock"
//!
//! [eval]
//! queries = ["red blob"]
//! gt_masks = "gt"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{DistillParams, RetryPolicy, DEFAULT_PROMPT};
use crate::masks::DetectionParams;
use crate::neutral::{NeutralMode, NeutralParams};
use crate::query::SelectParams;

pub const ADAPTER_ENV: &str = "SPLATSEG_ADAPTER";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("override `{0}`: expected key=value")]
    Override(String),
    #[error("config key `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Text queries for selection evaluation.
    pub queries: Vec<String>,
    /// `<gt_masks>/<query slug>/<view>.png`.
    pub gt_masks: Option<PathBuf>,
    /// PLY with per-vertex `label` indexing into `classes`.
    pub gt_cloud: Option<PathBuf>,
    pub classes: Vec<String>,
    /// Nearest-neighbour label transfer cutoff, world units.
    pub label_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { queries: Vec::new(), gt_masks: None, gt_cloud: None, classes: Vec::new(), label_radius: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: PathBuf,
    pub cameras: PathBuf,
    pub mask_root: PathBuf,
    pub frames: PathBuf,
    /// Stage artifacts go here.
    pub workdir: PathBuf,
    /// Defaults to `<workdir>/registry.json`.
    pub registry: Option<PathBuf>,

    pub entropy_threshold: f64,
    pub opacity_threshold: f64,
    pub neutral_mode: NeutralMode,
    pub match_threshold: f64,
    /// Take the single best object when nothing clears `match_threshold`.
    pub fallback: bool,
    pub new_instance_iou: f64,
    pub detection_interval: u32,

    pub top_n_views: usize,
    pub prompt: String,
    /// `mock`, `tcp://host:port` or `stdio:<command>`.
    pub adapter: String,
    pub embedding_dim: usize,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,

    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Seeds the mock embedder.
    pub seed: u64,

    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: "scene.ply".into(),
            cameras: "cameras.json".into(),
            mask_root: "masks".into(),
            frames: "frames".into(),
            workdir: "out".into(),
            registry: None,
            entropy_threshold: 0.6,
            opacity_threshold: 0.7,
            neutral_mode: NeutralMode::EntropyOpacity,
            match_threshold: 0.8,
            fallback: true,
            new_instance_iou: 0.1,
            detection_interval: 30,
            top_n_views: 5,
            prompt: DEFAULT_PROMPT.to_string(),
            adapter: "mock".into(),
            embedding_dim: 512,
            retry_attempts: 3,
            retry_backoff_ms: 200,
            threads: 0,
            seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just written"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Applies `key=value` (or `section.key=value`) overrides to a raw table.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| ConfigError::Override(item.clone()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Override(item.clone()));
        }
        let mut path: Vec<&str> = key.split('.').collect();
        let leaf = path.pop().expect("split yields at least one piece");
        let mut cursor = &mut *table;
        for section in path {
            let entry = cursor.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cursor = entry.as_table_mut().ok_or_else(|| ConfigError::Override(item.clone()))?;
        }
        cursor.insert(leaf.to_string(), override_value(value.trim()));
    }
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text with overrides applied; paths are left as written.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        Self::parse(text, overrides, Path::new("<inline>"))
    }

    fn parse(text: &str, overrides: &[String], path: &Path) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse { path: path.to_path_buf(), message };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let config: PipelineConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory; the adapter environment variable beats the file,
    /// and `overrides` beat both.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut all = Vec::new();
        if let Ok(endpoint) = std::env::var(ADAPTER_ENV) {
            all.push(format!("adapter={}", toml::Value::String(endpoint)));
        }
        all.extend_from_slice(overrides);
        let mut config = Self::parse(&text, &all, path)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.scene);
        join(&mut self.cameras);
        join(&mut self.mask_root);
        join(&mut self.frames);
        join(&mut self.workdir);
        for p in [&mut self.registry, &mut self.eval.gt_masks, &mut self.eval.gt_cloud].into_iter().flatten() {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |key: &'static str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::Invalid { key, reason: format!("{v} is outside [{lo}, {hi}]") })
            }
        };
        let positive = |key: &'static str, v: u64| {
            if v > 0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid { key, reason: "must be at least 1".into() })
            }
        };
        range("entropy_threshold", self.entropy_threshold, 0.0, 1.0)?;
        range("opacity_threshold", self.opacity_threshold, 0.0, 1.0)?;
        range("match_threshold", self.match_threshold, -1.0, 1.0)?;
        range("new_instance_iou", self.new_instance_iou, 0.0, 1.0)?;
        positive("detection_interval", self.detection_interval as u64)?;
        positive("top_n_views", self.top_n_views as u64)?;
        positive("embedding_dim", self.embedding_dim as u64)?;
        positive("retry_attempts", self.retry_attempts as u64)?;
        if !(self.eval.label_radius.is_finite() && self.eval.label_radius > 0.0) {
            return Err(ConfigError::Invalid { key: "eval.label_radius", reason: "must be positive".into() });
        }
        if self.adapter.trim().is_empty() {
            return Err(ConfigError::Invalid { key: "adapter", reason: "empty endpoint".into() });
        }
        Ok(())
    }

    pub fn registry_path(&self) -> PathBuf {
        self.registry.clone().unwrap_or_else(|| self.workdir.join("registry.json"))
    }

    pub fn neutral_params(&self) -> NeutralParams {
        NeutralParams { entropy_threshold: self.entropy_threshold, opacity_threshold: self.opacity_threshold, mode: self.neutral_mode }
    }

    pub fn detection_params(&self) -> DetectionParams {
        DetectionParams { new_instance_iou: self.new_instance_iou, detection_interval: self.detection_interval }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy { attempts: self.retry_attempts, backoff: std::time::Duration::from_millis(self.retry_backoff_ms) }
    }

    pub fn distill_params(&self) -> DistillParams {
        DistillParams { top_n_views: self.top_n_views, prompt: self.prompt.clone(), retry: self.retry_policy(), dim: self.embedding_dim }
    }

    pub fn select_params(&self) -> SelectParams {
        SelectParams { threshold: self.match_threshold, fallback: self.fallback, granularity: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml_str("", &[]).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn keys_and_overrides() {
        let text = "scene = \"a.ply\"\nentropy_threshold = 0.5\n[eval]\nclasses = [\"x\"]\n";
        let c = PipelineConfig::from_toml_str(
            text,
            &["entropy_threshold=0.4".into(), "adapter=tcp://127.0.0.1:9".into(), "eval.label_radius=0.1".into(), "neutral_mode=\"off\"".into()],
        )
        .unwrap();
        assert_eq!(c.scene, PathBuf::from("a.ply"));
        assert_eq!(c.entropy_threshold, 0.4);
        assert_eq!(c.adapter, "tcp://127.0.0.1:9");
        assert_eq!(c.eval.label_radius, 0.1);
        assert_eq!(c.eval.classes, vec!["x"]);
        assert_eq!(c.neutral_mode, NeutralMode::Off);
    }

    #[test]
    fn range_and_unknown_keys_rejected() {
        assert!(matches!(
            PipelineConfig::from_toml_str("entropy_threshold = 1.5", &[]),
            Err(ConfigError::Invalid { key: "entropy_threshold", .. })
        ));
        assert!(matches!(PipelineConfig::from_toml_str("match_threshold = -1.1", &[]), Err(ConfigError::Invalid { .. })));
        assert!(matches!(PipelineConfig::from_toml_str("top_n_views = 0", &[]), Err(ConfigError::Invalid { .. })));
        assert!(matches!(PipelineConfig::from_toml_str("tau = 1", &[]), Err(ConfigError::Parse { .. })));
        assert!(matches!(PipelineConfig::from_toml_str("", &["novalue".into()]), Err(ConfigError::Override(_))));
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "scene = \"s.ply\"\nworkdir = \"/abs/out\"\n").unwrap();
        let c = PipelineConfig::load(&path, &[]).unwrap();
        assert_eq!(c.scene, dir.path().join("s.ply"));
        assert_eq!(c.workdir, PathBuf::from("/abs/out"));
        assert_eq!(c.registry_path(), PathBuf::from("/abs/out/registry.json"));
    }
}
