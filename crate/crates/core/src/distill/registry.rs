//! The persisted, queryable artifact: per-object candidate names, their text
//! embeddings and the Gaussian index sets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::Granularity;

pub const REGISTRY_FORMAT: &str = "splatseg.registry/1";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("registry I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("registry JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("registry format `{found}` is not supported (expected `{REGISTRY_FORMAT}`)")]
    Format { found: String },
    #[error("object {track_id} ({granularity}): {reason}")]
    Invalid { track_id: u32, granularity: Granularity, reason: String },
    #[error("object {track_id} references Gaussian {index} but the scene has {len}")]
    IndexOutOfRange { track_id: u32, index: u32, len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub track_id: u32,
    pub granularity: Granularity,
    /// Empty when naming failed; such objects never match a query.
    pub names: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
    pub foreground: Vec<u32>,
    pub neutral: Vec<u32>,
    pub top_views: Vec<u32>,
}

impl RegistryEntry {
    pub fn is_unnamed(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRegistry {
    pub format: String,
    pub dim: usize,
    pub objects: Vec<RegistryEntry>,
}

impl InstanceRegistry {
    pub fn new(dim: usize) -> Self {
        Self { format: REGISTRY_FORMAT.to_string(), dim, objects: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn named(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.objects.iter().filter(|o| !o.is_unnamed())
    }

    pub fn get(&self, granularity: Granularity, track_id: u32) -> Option<&RegistryEntry> {
        self.objects.iter().find(|o| o.granularity == granularity && o.track_id == track_id)
    }

    /// Structural checks: format tag, names/embeddings parity, vector width,
    /// finite components, sorted unique index sets.
    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.format != REGISTRY_FORMAT {
            return Err(RegistryError::Format { found: self.format.clone() });
        }
        for o in &self.objects {
            let bad = |reason: String| RegistryError::Invalid { track_id: o.track_id, granularity: o.granularity, reason };
            if o.names.len() != o.embeddings.len() {
                return Err(bad(format!("{} names but {} embeddings", o.names.len(), o.embeddings.len())));
            }
            for v in &o.embeddings {
                if v.len() != self.dim {
                    return Err(bad(format!("embedding of width {} in a registry of width {}", v.len(), self.dim)));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(bad("non-finite embedding component".into()));
                }
            }
            for (label, set) in [("foreground", &o.foreground), ("neutral", &o.neutral)] {
                if set.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(bad(format!("{label} indices are not strictly ascending")));
                }
            }
        }
        Ok(())
    }

    /// Checks every index set against a scene of `len` Gaussians.
    pub fn validate_indices(&self, len: usize) -> Result<(), RegistryError> {
        for o in &self.objects {
            if let Some(&index) = o.foreground.iter().chain(&o.neutral).find(|&&i| i as usize >= len) {
                return Err(RegistryError::IndexOutOfRange { track_id: o.track_id, index, len });
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, RegistryError> {
        let registry: InstanceRegistry = serde_json::from_str(text)?;
        registry.validate()?;
        Ok(registry)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("registry serializes")
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path).map_err(|source| RegistryError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        std::fs::write(path, self.to_json_string()).map_err(|source| RegistryError::Io { path: path.display().to_string(), source })
    }
}
