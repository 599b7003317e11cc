//! Stage orchestration. Every stage reads its inputs from disk, writes a
//! format-tagged artifact into the work directory and can be re-run on its
//! own:
//!
//! | stage     | reads                              | writes                          |
//! |-----------|------------------------------------|---------------------------------|
//! | `ingest`  | cameras, mask root                 | `tracks.json`                   |
//! | `group`   | scene, cameras, `tracks.json`      | `groups.json`                   |
//! | `distill` | `groups.json`, `tracks.json`, frames | registry                      |
//! | `query`   | registry, scene, cameras           | `queries/<slug>.json` + masks   |
//! | `segment` | registry, scene                    | `segment.json`                  |
//! | `eval`    | registry, scene, cameras, GT       | `report.json`                   |
//! | `render`  | scene, cameras                     | `renders/<view>.png`            |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::distill::{
    self, AdapterClient, ClientError, DistillError, EmbeddingClient, InstanceRegistry, MockEmbedder, MockVlm, RegistryError,
    VlmClient,
};
use crate::eval::{self, EvalError, QueryPrediction, SegmentationReport, SelectionReport};
use crate::grouping::{accumulate_shared, hard_assign, ObjectGroup};
use crate::masks::{ingest_masks, BinaryMask, Granularity, MaskError, MaskLibrary, MaskSet, TrackRegistry, ViewMask};
use crate::neutral::{entropy_records, label_by_projection, refine, NeutralParams};
use crate::query::{self, QueryError, QueryResult, Segmentation};
use crate::render::{Rasterizer, RenderImage};
use crate::scene::{load_cameras, load_ply, Camera, Gaussians, SceneError};

pub const TRACKS_FORMAT: &str = "splatseg.tracks/1";
pub const GROUPS_FORMAT: &str = "splatseg.groups/1";
pub const QUERY_FORMAT: &str = "splatseg.query/1";
pub const SEGMENT_FORMAT: &str = "splatseg.segment/1";
pub const REPORT_FORMAT: &str = "splatseg.report/1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path} is missing; run `splatseg {command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

impl From<DistillError> for PipelineError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Client(c) => PipelineError::Client(c),
            other => PipelineError::Input(other.to_string()),
        }
    }
}

impl From<QueryError> for PipelineError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::Client(c) => PipelineError::Client(c),
            other => PipelineError::Input(other.to_string()),
        }
    }
}

impl PipelineError {
    /// 3 for failures of the external model clients, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Client(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Lowercase ASCII alphanumerics with single dashes between words.
pub fn slug(text: &str) -> String {
    let mut out = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("query");
    }
    out
}

/// `{"format": .., "body": ..}` wrapper shared by every stage artifact.
#[derive(Serialize, Deserialize)]
struct Tagged<T> {
    format: String,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, format: &str, body: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(&Tagged { format: format.to_string(), body }).expect("artifacts serialize");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path, format: &str, command: &'static str) -> Result<T> {
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact { path: path.to_path_buf(), command });
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |message: String| PipelineError::Artifact { path: path.to_path_buf(), message };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("<none>");
    if found != format {
        return Err(bad(format!("artifact format `{found}` does not match `{format}`; re-run `splatseg {command}`")));
    }
    let tagged: Tagged<T> = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
    Ok(tagged.body)
}

// ---- shared computational core ---------------------------------------------

/// Lifts every track with at least one valid view into a refined group.
/// Views are rendered once and shared by all tracks. Tracks without valid
/// views are skipped.
pub fn build_groups(
    gaussians: &Gaussians,
    cameras: &[Camera],
    tracks: &[&MaskSet],
    neutral: &NeutralParams,
    rasterizer: &Rasterizer,
) -> Vec<ObjectGroup> {
    let results = accumulate_shared(gaussians, cameras, tracks, rasterizer);
    let mut groups = Vec::new();
    for (track, result) in tracks.iter().zip(results) {
        let mut accumulator = match result {
            Ok(acc) => acc,
            Err(e) => {
                log::warn!("{e}; skipped");
                continue;
            }
        };
        accumulator.label_counts = label_by_projection(gaussians, cameras, track);
        let records = entropy_records(&accumulator.label_counts);
        let group = ObjectGroup {
            track_id: track.track_id,
            granularity: track.granularity,
            foreground: hard_assign(&accumulator),
            neutral: Vec::new(),
            accumulator,
        };
        groups.push(refine(group, &records, gaussians.opacities(), neutral));
    }
    groups
}

/// In-process or adapter-backed model clients.
#[derive(Clone)]
pub struct Clients {
    pub vlm: Arc<dyn VlmClient>,
    pub embedder: Arc<dyn EmbeddingClient>,
}

impl Clients {
    pub fn mock(dim: usize, seed: u64) -> Self {
        Self { vlm: Arc::new(MockVlm::new()), embedder: Arc::new(MockEmbedder::new(dim).with_seed(seed)) }
    }

    pub fn from_config(config: &PipelineConfig) -> Result<Self> {
        if config.adapter == "mock" {
            return Ok(Self::mock(config.embedding_dim, config.seed));
        }
        let client = Arc::new(AdapterClient::connect(&config.adapter, config.retry_policy())?);
        Ok(Self { vlm: client.clone(), embedder: client })
    }
}

/// Renders `selected` in every camera.
pub fn selection_masks(gaussians: &Gaussians, cameras: &[Camera], selected: &[u32], rasterizer: &Rasterizer) -> BTreeMap<u32, BinaryMask> {
    cameras.iter().map(|c| (c.view_id, rasterizer.render_selection(gaussians, c, selected))).collect()
}

pub fn to_rgb(image: &RenderImage) -> RgbImage {
    RgbImage::from_fn(image.width, image.height, |x, y| {
        let c = image.color[(y * image.width + x) as usize];
        image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

// ---- artifacts -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackViewRecord {
    pub view_id: u32,
    pub source: Option<PathBuf>,
    pub area: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub granularity: Granularity,
    pub track_id: u32,
    pub views: Vec<TrackViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracksArtifact {
    pub tracks: Vec<TrackRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub granularity: Granularity,
    pub track_id: u32,
    pub foreground: Vec<u32>,
    pub neutral: Vec<u32>,
    /// Foreground size before neutral points were removed.
    pub assigned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsArtifact {
    pub gaussians: usize,
    pub groups: Vec<GroupRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryArtifact {
    #[serde(flatten)]
    pub result: QueryResult,
    /// Per-view selection mask files, relative to the work directory.
    pub masks: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentArtifact {
    #[serde(flatten)]
    pub segmentation: Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub selection: Option<SelectionReport>,
    pub segmentation: Option<SegmentationReport>,
    pub config: PipelineConfig,
}

// ---- stages ----------------------------------------------------------------

pub struct Pipeline {
    pub config: PipelineConfig,
    pub rasterizer: Rasterizer,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config, rasterizer: Rasterizer::default() }
    }

    pub fn tracks_path(&self) -> PathBuf {
        self.config.workdir.join("tracks.json")
    }

    pub fn groups_path(&self) -> PathBuf {
        self.config.workdir.join("groups.json")
    }

    pub fn query_path(&self, text: &str) -> PathBuf {
        self.config.workdir.join("queries").join(format!("{}.json", slug(text)))
    }

    pub fn segment_path(&self) -> PathBuf {
        self.config.workdir.join("segment.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.config.workdir.join("report.json")
    }

    fn cameras(&self) -> Result<Vec<Camera>> {
        Ok(load_cameras(&self.config.cameras)?)
    }

    fn gaussians(&self) -> Result<Gaussians> {
        Ok(load_ply(&self.config.scene)?)
    }

    fn registry(&self, gaussians: usize) -> Result<InstanceRegistry> {
        let path = self.config.registry_path();
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact { path, command: "distill" });
        }
        let registry = InstanceRegistry::load(&path)?;
        registry.validate_indices(gaussians)?;
        Ok(registry)
    }

    pub fn ingest(&self) -> Result<TracksArtifact> {
        let cameras = self.cameras()?;
        let library = ingest_masks(&self.config.mask_root, &cameras, self.config.detection_params())?;
        if library.track_count() == 0 {
            log::warn!("no tracks found under {}", self.config.mask_root.display());
        }
        let artifact = TracksArtifact {
            tracks: library
                .tracks()
                .map(|t| TrackRecord {
                    granularity: t.granularity,
                    track_id: t.track_id,
                    views: t
                        .views
                        .iter()
                        .map(|v| TrackViewRecord { view_id: v.view_id, source: v.source.clone(), area: v.area() })
                        .collect(),
                })
                .collect(),
        };
        write_json(&self.tracks_path(), TRACKS_FORMAT, &artifact)?;
        Ok(artifact)
    }

    /// Reloads the masks listed in `tracks.json`.
    pub fn load_library(&self, cameras: &[Camera]) -> Result<MaskLibrary> {
        let artifact: TracksArtifact = read_json(&self.tracks_path(), TRACKS_FORMAT, "ingest")?;
        let by_view: BTreeMap<u32, &Camera> = cameras.iter().map(|c| (c.view_id, c)).collect();
        let mut library = MaskLibrary::default();
        for record in artifact.tracks {
            let mut views = Vec::with_capacity(record.views.len());
            for v in record.views {
                let view = match &v.source {
                    Some(path) => {
                        let mask = BinaryMask::load(path)?;
                        if let Some(camera) = by_view.get(&v.view_id) {
                            if mask.dimensions() != (camera.width, camera.height) {
                                return Err(MaskError::DimensionMismatch {
                                    expected: (camera.width, camera.height),
                                    found: mask.dimensions(),
                                    context: path.display().to_string(),
                                }
                                .into());
                            }
                        }
                        ViewMask::present(v.view_id, mask, Some(path.clone()))
                    }
                    None => ViewMask::absent(v.view_id),
                };
                views.push(view);
            }
            library
                .registries
                .entry(record.granularity)
                .or_insert_with(|| TrackRegistry::new(record.granularity, self.config.detection_interval))
                .insert(MaskSet::new(record.granularity, record.track_id, views));
        }
        Ok(library)
    }

    pub fn group(&self) -> Result<GroupsArtifact> {
        let gaussians = self.gaussians()?;
        let cameras = self.cameras()?;
        let library = self.load_library(&cameras)?;
        let tracks: Vec<&MaskSet> = library.tracks().collect();
        if tracks.is_empty() {
            log::warn!("no tracks to group");
        }
        let groups = build_groups(&gaussians, &cameras, &tracks, &self.config.neutral_params(), &self.rasterizer);
        let artifact = GroupsArtifact {
            gaussians: gaussians.len(),
            groups: groups
                .into_iter()
                .map(|g| GroupRecord {
                    granularity: g.granularity,
                    track_id: g.track_id,
                    assigned: hard_assign(&g.accumulator).len(),
                    foreground: g.foreground,
                    neutral: g.neutral,
                })
                .collect(),
        };
        write_json(&self.groups_path(), GROUPS_FORMAT, &artifact)?;
        Ok(artifact)
    }

    pub fn load_groups(&self) -> Result<GroupsArtifact> {
        read_json(&self.groups_path(), GROUPS_FORMAT, "group")
    }

    pub fn distill(&self, clients: &Clients) -> Result<InstanceRegistry> {
        let groups = self.load_groups()?;
        let cameras = self.cameras()?;
        let library = self.load_library(&cameras)?;
        let mut pairs: Vec<(ObjectGroup, &MaskSet)> = Vec::new();
        for g in &groups.groups {
            let mask_set = library.get(g.granularity, g.track_id).ok_or_else(|| PipelineError::Artifact {
                path: self.groups_path(),
                message: format!("{} track {} is not in tracks.json; re-run `splatseg group`", g.granularity, g.track_id),
            })?;
            let group = ObjectGroup {
                track_id: g.track_id,
                granularity: g.granularity,
                foreground: g.foreground.clone(),
                neutral: g.neutral.clone(),
                accumulator: crate::grouping::GroupAccumulator::zeros(0),
            };
            pairs.push((group, mask_set));
        }
        let refs: Vec<(&ObjectGroup, &MaskSet)> = pairs.iter().map(|(g, m)| (g, *m)).collect();
        let registry =
            distill::distill_all(&refs, &self.config.frames, clients.vlm.as_ref(), clients.embedder.as_ref(), &self.config.distill_params())?;
        let path = self.config.registry_path();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        registry.save(&path)?;
        Ok(registry)
    }

    pub fn query(&self, text: &str, granularity: Option<Granularity>, clients: &Clients) -> Result<QueryArtifact> {
        let gaussians = self.gaussians()?;
        let cameras = self.cameras()?;
        let registry = self.registry(gaussians.len())?;
        let params = query::SelectParams { granularity, ..self.config.select_params() };
        let result = query::select(&registry, text, clients.embedder.as_ref(), &params)?;
        let slug = slug(text);
        let mut files = Vec::new();
        for (view_id, mask) in selection_masks(&gaussians, &cameras, &result.selected, &self.rasterizer) {
            let rel = PathBuf::from("queries").join(&slug).join(format!("{view_id}.png"));
            let path = self.config.workdir.join(&rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            mask.save(&path)?;
            files.push(rel);
        }
        let artifact = QueryArtifact { result, masks: files };
        write_json(&self.query_path(text), QUERY_FORMAT, &artifact)?;
        Ok(artifact)
    }

    pub fn segment(&self, classes: &[String], clients: &Clients) -> Result<SegmentArtifact> {
        if classes.is_empty() {
            return Err(PipelineError::Input("segment needs at least one class".into()));
        }
        let gaussians = self.gaussians()?;
        let registry = self.registry(gaussians.len())?;
        let segmentation = query::segment(&registry, classes, clients.embedder.as_ref(), self.config.match_threshold, gaussians.len())?;
        let artifact = SegmentArtifact { segmentation };
        write_json(&self.segment_path(), SEGMENT_FORMAT, &artifact)?;
        Ok(artifact)
    }

    fn load_gt_masks(&self, root: &Path, cameras: &[Camera]) -> Result<BTreeMap<String, BTreeMap<u32, BinaryMask>>> {
        let mut gt = BTreeMap::new();
        for q in &self.config.eval.queries {
            let dir = root.join(slug(q));
            let mut views = BTreeMap::new();
            for c in cameras {
                let path = dir.join(format!("{}.png", c.view_id));
                if path.is_file() {
                    views.insert(c.view_id, BinaryMask::load(&path)?);
                } else {
                    log::warn!("query `{q}`: no GT mask for view {}", c.view_id);
                }
            }
            gt.insert(q.clone(), views);
        }
        Ok(gt)
    }

    pub fn eval(&self, clients: &Clients) -> Result<EvalArtifact> {
        let eval_cfg = &self.config.eval;
        let gaussians = self.gaussians()?;
        let cameras = self.cameras()?;
        let registry = self.registry(gaussians.len())?;

        let selection = match &eval_cfg.gt_masks {
            Some(root) if !eval_cfg.queries.is_empty() => {
                let gt = self.load_gt_masks(root, &cameras)?;
                let mut predictions = Vec::new();
                for q in &eval_cfg.queries {
                    let result = query::select(&registry, q, clients.embedder.as_ref(), &self.config.select_params())?;
                    predictions.push(QueryPrediction {
                        query: q.clone(),
                        masks: selection_masks(&gaussians, &cameras, &result.selected, &self.rasterizer),
                    });
                }
                Some(eval::eval_selection_2d(&predictions, &gt)?)
            }
            _ => None,
        };

        let segmentation = match &eval_cfg.gt_cloud {
            Some(path) if !eval_cfg.classes.is_empty() => {
                let cloud = eval::load_labeled_cloud(path)?;
                let seg = query::segment(&registry, &eval_cfg.classes, clients.embedder.as_ref(), self.config.match_threshold, gaussians.len())?;
                Some(eval::eval_segmentation_3d(gaussians.positions(), &seg.labels, &eval_cfg.classes, &cloud, eval_cfg.label_radius)?)
            }
            _ => None,
        };
        if selection.is_none() && segmentation.is_none() {
            log::warn!("nothing to evaluate: set eval.queries + eval.gt_masks and/or eval.classes + eval.gt_cloud");
        }
        let artifact = EvalArtifact { selection, segmentation, config: self.config.clone() };
        write_json(&self.report_path(), REPORT_FORMAT, &artifact)?;
        Ok(artifact)
    }

    /// Colour renders of every view, or of the Gaussians selected by a
    /// previous query when `query` is given.
    pub fn render(&self, query: Option<&str>) -> Result<Vec<PathBuf>> {
        let gaussians = self.gaussians()?;
        let cameras = self.cameras()?;
        let (scene, dir) = match query {
            Some(text) => {
                let artifact: QueryArtifact = read_json(&self.query_path(text), QUERY_FORMAT, "query")?;
                let keep: std::collections::HashSet<u32> = artifact.result.selected.into_iter().collect();
                (gaussians.filter(|i| keep.contains(&(i as u32))), self.config.workdir.join("renders").join(slug(text)))
            }
            None => (gaussians, self.config.workdir.join("renders")),
        };
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut written = Vec::new();
        for camera in &cameras {
            let path = dir.join(format!("{}.png", camera.view_id));
            to_rgb(&self.rasterizer.render(&scene, camera))
                .save(&path)
                .map_err(|e| PipelineError::Artifact { path: path.clone(), message: e.to_string() })?;
            written.push(path);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Red Blob"), "red-blob");
        assert_eq!(slug("  a/b  c!"), "a-b-c");
        assert_eq!(slug("!!"), "query");
    }

    #[test]
    fn artifact_format_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_json(&path, "a/1", &TracksArtifact { tracks: vec![] }).unwrap();
        assert!(read_json::<TracksArtifact>(&path, "a/1", "ingest").is_ok());
        assert!(matches!(read_json::<TracksArtifact>(&path, "a/2", "ingest"), Err(PipelineError::Artifact { .. })));
        let missing = read_json::<TracksArtifact>(&dir.path().join("nope.json"), "a/1", "ingest").unwrap_err();
        assert!(missing.to_string().contains("splatseg ingest"), "{missing}");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Client(ClientError::Unreachable("x".into())).exit_code(), 3);
        assert_eq!(PipelineError::Input("x".into()).exit_code(), 2);
    }
}
