//! Multi-view instance masks: ingestion of externally produced per-track
//! masks, null-mask bookkeeping and periodic new-instance detection.
//!
//! Each granularity level keeps its own [`TrackRegistry`]; track ids are only
//! unique within a level.

mod bitmap;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::bitmap::{iou, BinaryMask, FOREGROUND_LEVEL};
use crate::scene::Camera;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("{context}: mask is {found:?}, expected {expected:?}")]
    DimensionMismatch { expected: (u32, u32), found: (u32, u32), context: String },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("view {view_id} is not a detection frame (interval {interval})")]
    NotDetectionFrame { view_id: u32, interval: u32 },
    #[error("unknown granularity `{0}`")]
    UnknownGranularity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Part,
    Object,
    Scene,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Part, Granularity::Object, Granularity::Scene];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Part => "part",
            Self::Object => "object",
            Self::Scene => "scene",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = MaskError;
    fn from_str(s: &str) -> Result<Self, MaskError> {
        match s {
            "part" => Ok(Self::Part),
            "object" => Ok(Self::Object),
            "scene" => Ok(Self::Scene),
            other => Err(MaskError::UnknownGranularity(other.to_string())),
        }
    }
}

/// One view of a track. `mask` is `None` when the file was absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMask {
    pub view_id: u32,
    pub mask: Option<BinaryMask>,
    pub source: Option<PathBuf>,
    area: u64,
}

impl ViewMask {
    pub fn present(view_id: u32, mask: BinaryMask, source: Option<PathBuf>) -> Self {
        let area = mask.count();
        Self { view_id, mask: Some(mask), source, area }
    }

    pub fn absent(view_id: u32) -> Self {
        Self { view_id, mask: None, source: None, area: 0 }
    }

    /// False for absent and null (all-background) masks.
    pub fn is_valid(&self) -> bool {
        self.area > 0
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        self.area
    }
}

/// One track's masks across views, ordered by view id.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub granularity: Granularity,
    pub track_id: u32,
    pub views: Vec<ViewMask>,
}

impl MaskSet {
    pub fn new(granularity: Granularity, track_id: u32, mut views: Vec<ViewMask>) -> Self {
        views.sort_by_key(|v| v.view_id);
        Self { granularity, track_id, views }
    }

    pub fn valid_views(&self) -> impl Iterator<Item = &ViewMask> {
        self.views.iter().filter(|v| v.is_valid())
    }

    pub fn valid_count(&self) -> usize {
        self.valid_views().count()
    }

    pub fn view(&self, view_id: u32) -> Option<&ViewMask> {
        self.views.binary_search_by_key(&view_id, |v| v.view_id).ok().map(|i| &self.views[i])
    }

    /// The mask at `view_id` if that view is valid.
    pub fn valid_mask(&self, view_id: u32) -> Option<&BinaryMask> {
        self.view(view_id).filter(|v| v.is_valid()).and_then(|v| v.mask.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionParams {
    /// Fresh masks whose best IoU with existing tracks is below this become new tracks.
    pub new_instance_iou: f64,
    /// Detection runs on views whose id is a multiple of this.
    pub detection_interval: u32,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self { new_instance_iou: 0.1, detection_interval: 30 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRegistry {
    pub granularity: Granularity,
    pub tracks: Vec<MaskSet>,
    pub next_id: u32,
    pub detection_interval: u32,
}

impl TrackRegistry {
    pub fn new(granularity: Granularity, detection_interval: u32) -> Self {
        Self { granularity, tracks: Vec::new(), next_id: 0, detection_interval }
    }

    pub fn insert(&mut self, track: MaskSet) {
        debug_assert_eq!(track.granularity, self.granularity);
        self.next_id = self.next_id.max(track.track_id + 1);
        let pos = self.tracks.partition_point(|t| t.track_id < track.track_id);
        if self.tracks.get(pos).is_some_and(|t| t.track_id == track.track_id) {
            self.tracks[pos] = track;
        } else {
            self.tracks.insert(pos, track);
        }
    }

    pub fn track(&self, track_id: u32) -> Option<&MaskSet> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }
}

/// Checks each fresh mask from a detection frame against every track's mask
/// at that view and registers the ones that overlap nothing (max IoU below
/// the threshold) as new tracks seeded at this view only. Tracks registered
/// earlier in the same call take part in the comparison.
pub fn detect_new_instances(
    registry: &mut TrackRegistry,
    view_id: u32,
    fresh: Vec<(BinaryMask, Option<PathBuf>)>,
    new_instance_iou: f64,
) -> Result<Vec<u32>, MaskError> {
    let interval = registry.detection_interval.max(1);
    if !view_id.is_multiple_of(interval) {
        return Err(MaskError::NotDetectionFrame { view_id, interval });
    }
    let mut created = Vec::new();
    for (mask, source) in fresh {
        if mask.is_empty() {
            continue;
        }
        let mut best = 0.0f64;
        for track in &registry.tracks {
            if let Some(existing) = track.valid_mask(view_id) {
                best = best.max(iou(&mask, existing)?);
            }
        }
        if best < new_instance_iou {
            let id = registry.next_id;
            let track = MaskSet::new(registry.granularity, id, vec![ViewMask::present(view_id, mask, source)]);
            registry.insert(track);
            created.push(id);
        }
    }
    Ok(created)
}

/// Every granularity's registry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskLibrary {
    pub registries: BTreeMap<Granularity, TrackRegistry>,
}

impl MaskLibrary {
    pub fn tracks(&self) -> impl Iterator<Item = &MaskSet> {
        self.registries.values().flat_map(|r| r.tracks.iter())
    }

    pub fn track_count(&self) -> usize {
        self.registries.values().map(|r| r.tracks.len()).sum()
    }

    pub fn get(&self, granularity: Granularity, track_id: u32) -> Option<&MaskSet> {
        self.registries.get(&granularity).and_then(|r| r.track(track_id))
    }
}

fn numeric_entries(dir: &Path, png: bool) -> Result<Vec<(u32, PathBuf)>, MaskError> {
    let read = fs::read_dir(dir).map_err(|e| MaskError::Io { path: dir.to_path_buf(), source: e })?;
    let mut out = Vec::new();
    for entry in read {
        let entry = entry.map_err(|e| MaskError::Io { path: dir.to_path_buf(), source: e })?;
        let path = entry.path();
        let name = if png {
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            path.file_stem().and_then(|s| s.to_str()).map(str::to_owned)
        } else {
            if !path.is_dir() {
                continue;
            }
            path.file_name().and_then(|s| s.to_str()).map(str::to_owned)
        };
        match name.as_deref().map(u32::from_str) {
            Some(Ok(id)) => out.push((id, path)),
            _ => log::warn!("ignoring {}: name is not an integer id", path.display()),
        }
    }
    out.sort();
    Ok(out)
}

fn load_checked(path: &Path, camera: &Camera, context: impl FnOnce() -> String) -> Result<BinaryMask, MaskError> {
    let mask = BinaryMask::load(path)?;
    let expected = (camera.width, camera.height);
    if mask.dimensions() != expected {
        return Err(MaskError::DimensionMismatch { expected, found: mask.dimensions(), context: context() });
    }
    Ok(mask)
}

/// Loads `root/<granularity>/<track_id>/<view_id>.png` for every
/// camera view, then applies periodic detection from
/// `root/detect/<granularity>/<view_id>/<k>.png` when present.
///
/// Missing view files and all-black masks are kept as invalid views.
pub fn ingest_masks(root: &Path, cameras: &[Camera], params: DetectionParams) -> Result<MaskLibrary, MaskError> {
    let by_view: BTreeMap<u32, &Camera> = cameras.iter().map(|c| (c.view_id, c)).collect();
    let mut library = MaskLibrary::default();
    let masks_dir = root;
    if !masks_dir.is_dir() {
        log::warn!("{} does not exist; no tracks ingested", masks_dir.display());
    }
    for granularity in Granularity::ALL {
        let mut registry = TrackRegistry::new(granularity, params.detection_interval);
        let gran_dir = masks_dir.join(granularity.as_str());
        if gran_dir.is_dir() {
            for (track_id, track_dir) in numeric_entries(&gran_dir, false)? {
                let files: BTreeMap<u32, PathBuf> = numeric_entries(&track_dir, true)?.into_iter().collect();
                for view_id in files.keys().filter(|v| !by_view.contains_key(v)) {
                    log::warn!("{granularity}/{track_id}: mask for unknown view {view_id} ignored");
                }
                let mut views = Vec::with_capacity(by_view.len());
                for (&view_id, camera) in &by_view {
                    match files.get(&view_id) {
                        Some(path) => {
                            let mask = load_checked(path, camera, || {
                                format!("{granularity} track {track_id}, view {view_id}")
                            })?;
                            views.push(ViewMask::present(view_id, mask, Some(path.clone())));
                        }
                        None => views.push(ViewMask::absent(view_id)),
                    }
                }
                registry.insert(MaskSet::new(granularity, track_id, views));
            }
        }

        let detect_dir = root.join("detect").join(granularity.as_str());
        if detect_dir.is_dir() {
            for (view_id, view_dir) in numeric_entries(&detect_dir, false)? {
                let Some(camera) = by_view.get(&view_id) else {
                    log::warn!("detect/{granularity}/{view_id}: unknown view, skipped");
                    continue;
                };
                if view_id % params.detection_interval.max(1) != 0 {
                    log::warn!("detect/{granularity}/{view_id}: not a detection frame, skipped");
                    continue;
                }
                let mut fresh = Vec::new();
                for (k, path) in numeric_entries(&view_dir, true)? {
                    let mask = load_checked(&path, camera, || format!("{granularity} detection {k}, view {view_id}"))?;
                    fresh.push((mask, Some(path)));
                }
                let created = detect_new_instances(&mut registry, view_id, fresh, params.new_instance_iou)?;
                if !created.is_empty() {
                    log::info!("{granularity}: view {view_id} seeded new tracks {created:?}");
                }
            }
        }
        if !registry.tracks.is_empty() {
            library.registries.insert(granularity, registry);
        }
    }
    Ok(library)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn camera(view_id: u32, w: u32, h: u32) -> Camera {
        Camera { view_id, fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: w, height: h, world_to_camera: Matrix4::identity() }
    }

    fn write(path: &Path, mask: &BinaryMask) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        mask.save(path).unwrap();
    }

    #[test]
    fn ingest_flags_null_and_missing_views() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let cams = [camera(0, 4, 4), camera(1, 4, 4), camera(2, 4, 4)];
        write(&root.join("object/7/0.png"), &BinaryMask::from_fn(4, 4, |_, y| y < 2));
        write(&root.join("object/7/1.png"), &BinaryMask::new(4, 4));
        let lib = ingest_masks(root, &cams, DetectionParams::default()).unwrap();
        let t = lib.get(Granularity::Object, 7).unwrap();
        assert_eq!(t.views.len(), 3);
        assert!(t.views[0].is_valid());
        assert_eq!(t.views[0].area(), 8);
        assert!(!t.views[1].is_valid());
        assert!(t.views[1].mask.is_some(), "null masks are kept");
        assert!(!t.views[2].is_valid());
        assert!(t.views[2].mask.is_none());
    }

    #[test]
    fn ingest_dimension_mismatch_names_view_and_track() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("part/3/1.png"), &BinaryMask::new(5, 4));
        let err = ingest_masks(dir.path(), &[camera(1, 4, 4)], DetectionParams::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("track 3") && msg.contains("view 1"), "{msg}");
    }

    #[test]
    fn ingest_is_deterministic_and_handles_missing_root() {
        let dir = tempfile::tempdir().unwrap();
        let cams = [camera(0, 4, 4), camera(30, 4, 4)];
        assert_eq!(ingest_masks(dir.path(), &cams, DetectionParams::default()).unwrap().track_count(), 0);
        for t in [2, 0, 1] {
            write(&dir.path().join(format!("scene/{t}/0.png")), &BinaryMask::from_fn(4, 4, |x, _| x == t));
        }
        write(&dir.path().join("detect/scene/30/0.png"), &BinaryMask::from_fn(4, 4, |_, _| true));
        let a = ingest_masks(dir.path(), &cams, DetectionParams::default()).unwrap();
        let b = ingest_masks(dir.path(), &cams, DetectionParams::default()).unwrap();
        assert_eq!(a, b);
        let ids: Vec<u32> = a.tracks().map(|t| t.track_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        let seeded = a.get(Granularity::Scene, 3).unwrap();
        assert_eq!(seeded.views.len(), 1);
        assert_eq!(seeded.views[0].view_id, 30);
    }

    fn registry_with(mask: BinaryMask) -> TrackRegistry {
        let mut r = TrackRegistry::new(Granularity::Object, 30);
        r.insert(MaskSet::new(Granularity::Object, 0, vec![ViewMask::present(0, mask, None)]));
        r
    }

    #[test]
    fn identical_fresh_mask_is_not_new() {
        let m = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let mut r = registry_with(m.clone());
        assert!(detect_new_instances(&mut r, 0, vec![(m, None)], 0.1).unwrap().is_empty());
        assert_eq!(r.tracks.len(), 1);
    }

    #[test]
    fn disjoint_fresh_mask_is_new() {
        let mut r = registry_with(BinaryMask::from_fn(4, 4, |x, _| x < 2));
        let fresh = BinaryMask::from_fn(4, 4, |x, _| x >= 2);
        assert_eq!(detect_new_instances(&mut r, 0, vec![(fresh, None)], 0.1).unwrap(), vec![1]);
        assert_eq!(r.next_id, 2);
        assert!(r.track(1).unwrap().valid_mask(0).is_some());
    }

    #[test]
    fn half_overlap_is_not_new() {
        // existing {p0,p1,p2}, fresh {p1,p2,p3}: |∩| = 2, |∪| = 4, IoU 0.5
        let existing = BinaryMask::from_fn(4, 1, |x, _| x < 3);
        let fresh = BinaryMask::from_fn(4, 1, |x, _| x > 0);
        assert_eq!(iou(&existing, &fresh).unwrap(), 0.5);
        let mut r = registry_with(existing);
        assert!(detect_new_instances(&mut r, 0, vec![(fresh, None)], 0.1).unwrap().is_empty());
    }

    #[test]
    fn non_detection_frame_rejected() {
        let mut r = registry_with(BinaryMask::new(2, 2));
        assert!(matches!(
            detect_new_instances(&mut r, 7, vec![], 0.1),
            Err(MaskError::NotDetectionFrame { view_id: 7, interval: 30 })
        ));
    }
}
