//! Naming objects: pick the views where a group is most visible, show the
//! masked crops to a captioning model, and embed the returned names.

pub mod adapter;
pub mod client;
pub mod registry;

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use thiserror::Error;

pub use adapter::{AdapterClient, RetryPolicy};
pub use client::{ClientError, DescribeRequest, EmbeddingClient, MockEmbedder, MockVlm, VlmClient};
pub use registry::{InstanceRegistry, RegistryEntry, RegistryError, REGISTRY_FORMAT};

use crate::grouping::ObjectGroup;
use crate::masks::{BinaryMask, Granularity, MaskSet};

pub const DEFAULT_PROMPT: &str = "List up to 8 short names for the main object in these images, one per line.";
pub const MAX_NAMES: usize = 16;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("{granularity} track {track_id} has no valid views")]
    NoValidViews { granularity: Granularity, track_id: u32 },
    #[error("missing frame for view {view_id}: {path}")]
    MissingFrame { view_id: u32, path: PathBuf },
    #[error("frame {path}: {message}")]
    Frame { path: PathBuf, message: String },
    #[error("embedding width mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Valid views by foreground area, largest first, ties to the lower view id.
pub fn select_top_views(mask_set: &MaskSet, n: usize) -> Result<Vec<u32>, DistillError> {
    let mut views: Vec<(u64, u32)> = mask_set.valid_views().map(|v| (v.area(), v.view_id)).collect();
    if views.is_empty() {
        return Err(DistillError::NoValidViews { granularity: mask_set.granularity, track_id: mask_set.track_id });
    }
    views.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(views.into_iter().take(n).map(|(_, v)| v).collect())
}

/// Inclusive crop window: the mask's bounding box grown by 10% of its size
/// (rounded up) on every side, clamped to the image.
pub fn padded_crop(mask: &BinaryMask) -> Option<[u32; 4]> {
    let [x0, y0, x1, y1] = mask.bounding_box()?;
    let pad_x = ((x1 - x0 + 1) as f64 * 0.1).ceil() as u32;
    let pad_y = ((y1 - y0 + 1) as f64 * 0.1).ceil() as u32;
    Some([
        x0.saturating_sub(pad_x),
        y0.saturating_sub(pad_y),
        (x1 + pad_x).min(mask.width() - 1),
        (y1 + pad_y).min(mask.height() - 1),
    ])
}

/// Blacks out pixels outside `mask` and crops to [`padded_crop`]. An empty
/// mask yields a black full frame.
pub fn mask_and_crop(frame: &RgbImage, mask: &BinaryMask) -> RgbImage {
    let Some([x0, y0, x1, y1]) = padded_crop(mask) else {
        return RgbImage::new(frame.width(), frame.height());
    };
    RgbImage::from_fn(x1 - x0 + 1, y1 - y0 + 1, |x, y| {
        let (fx, fy) = (x + x0, y + y0);
        if mask.get(fx, fy) {
            *frame.get_pixel(fx, fy)
        } else {
            image::Rgb([0, 0, 0])
        }
    })
}

pub fn frame_path(frames_root: &Path, view_id: u32) -> PathBuf {
    frames_root.join(format!("{view_id}.png"))
}

pub fn load_frame(frames_root: &Path, view_id: u32) -> Result<RgbImage, DistillError> {
    let path = frame_path(frames_root, view_id);
    if !path.is_file() {
        return Err(DistillError::MissingFrame { view_id, path });
    }
    image::open(&path)
        .map(|img| img.into_rgb8())
        .map_err(|e| DistillError::Frame { path, message: e.to_string() })
}

/// Loads the frames of `view_ids` and masks/crops each with the track's mask.
pub fn compose_masked_views(frames_root: &Path, mask_set: &MaskSet, view_ids: &[u32]) -> Result<Vec<RgbImage>, DistillError> {
    view_ids
        .iter()
        .map(|&view_id| {
            let frame = load_frame(frames_root, view_id)?;
            let mask = mask_set
                .valid_mask(view_id)
                .ok_or(DistillError::NoValidViews { granularity: mask_set.granularity, track_id: mask_set.track_id })?;
            if frame.dimensions() != mask.dimensions() {
                return Err(DistillError::Frame {
                    path: frame_path(frames_root, view_id),
                    message: format!("frame is {:?} but mask is {:?}", frame.dimensions(), mask.dimensions()),
                });
            }
            Ok(mask_and_crop(&frame, mask))
        })
        .collect()
}

/// Splits multi-line answers, strips list markers, lowercases, drops empties
/// and case-insensitive duplicates (first wins), and keeps at most `cap`.
pub fn clean_names(raw: &[String], cap: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in raw.iter().flat_map(|s| s.lines()) {
        let name = strip_list_marker(line.trim()).trim().to_lowercase();
        if name.is_empty() || out.contains(&name) {
            continue;
        }
        out.push(name);
        if out.len() == cap {
            break;
        }
    }
    out
}

fn strip_list_marker(s: &str) -> &str {
    if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
        return rest;
    }
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        if let Some(rest) = s[digits..].strip_prefix(['.', ')']) {
            return rest;
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct DistillParams {
    pub top_n_views: usize,
    pub prompt: String,
    pub retry: RetryPolicy,
    /// Expected embedding width; a client reporting anything else is fatal.
    pub dim: usize,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self { top_n_views: 5, prompt: DEFAULT_PROMPT.to_string(), retry: RetryPolicy::default(), dim: 512 }
    }
}

/// Produces the registry entry for one refined group. A captioner that keeps
/// failing leaves the entry unnamed rather than aborting.
pub fn distill_object(
    group: &ObjectGroup,
    mask_set: &MaskSet,
    frames_root: &Path,
    vlm: &dyn VlmClient,
    embedder: &dyn EmbeddingClient,
    params: &DistillParams,
) -> Result<RegistryEntry, DistillError> {
    let top_views = select_top_views(mask_set, params.top_n_views)?;
    let images = compose_masked_views(frames_root, mask_set, &top_views)?;
    let request = DescribeRequest { track_id: group.track_id, granularity: group.granularity, prompt: &params.prompt, images: &images };
    let named = params.retry.run(|| {
        let names = clean_names(&vlm.describe(&request)?, MAX_NAMES);
        if names.is_empty() {
            Err(ClientError::NoNames)
        } else {
            Ok(names)
        }
    });
    let names = match named {
        Ok(names) => names,
        Err(e) => {
            log::warn!("{} track {} left unnamed: {e}", group.granularity, group.track_id);
            Vec::new()
        }
    };
    let embeddings = if names.is_empty() { Vec::new() } else { embedder.embed(&names)? };
    if embeddings.len() != names.len() {
        return Err(ClientError::Protocol(format!("{} names embedded into {} vectors", names.len(), embeddings.len())).into());
    }
    if let Some(v) = embeddings.iter().find(|v| v.len() != params.dim) {
        return Err(DistillError::Dimension { expected: params.dim, found: v.len() });
    }
    Ok(RegistryEntry {
        track_id: group.track_id,
        granularity: group.granularity,
        names,
        embeddings,
        foreground: group.foreground.clone(),
        neutral: group.neutral.clone(),
        top_views,
    })
}

/// Distills every `(group, mask set)` pair into one registry, in input order.
/// Objects run concurrently when the embedder allows it.
pub fn distill_all(
    objects: &[(&ObjectGroup, &MaskSet)],
    frames_root: &Path,
    vlm: &dyn VlmClient,
    embedder: &dyn EmbeddingClient,
    params: &DistillParams,
) -> Result<InstanceRegistry, DistillError> {
    if embedder.dim() != params.dim {
        return Err(DistillError::Dimension { expected: params.dim, found: embedder.dim() });
    }
    let one = |(group, mask_set): &(&ObjectGroup, &MaskSet)| distill_object(group, mask_set, frames_root, vlm, embedder, params);
    let entries: Result<Vec<RegistryEntry>, DistillError> = if embedder.concurrent() {
        objects.par_iter().map(one).collect()
    } else {
        objects.iter().map(one).collect()
    };
    let mut registry = InstanceRegistry::new(params.dim);
    registry.objects = entries?;
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::ViewMask;

    fn area_mask(area: u32) -> BinaryMask {
        BinaryMask::from_fn(40, 40, |x, y| y * 40 + x < area)
    }

    #[test]
    fn top_views_by_area_then_id() {
        let set = MaskSet::new(
            Granularity::Object,
            0,
            vec![
                ViewMask::present(0, area_mask(100), None),
                ViewMask::present(1, area_mask(300), None),
                ViewMask::present(2, area_mask(200), None),
                ViewMask::absent(3),
            ],
        );
        assert_eq!(select_top_views(&set, 2).unwrap(), vec![1, 2]);
        assert_eq!(select_top_views(&set, 10).unwrap(), vec![1, 2, 0]);
        let tie = MaskSet::new(
            Granularity::Object,
            0,
            vec![ViewMask::present(3, area_mask(50), None), ViewMask::present(1, area_mask(50), None)],
        );
        assert_eq!(select_top_views(&tie, 1).unwrap(), vec![1]);
        let none = MaskSet::new(Granularity::Object, 0, vec![ViewMask::absent(0)]);
        assert!(matches!(select_top_views(&none, 1), Err(DistillError::NoValidViews { .. })));
    }

    #[test]
    fn crop_rules() {
        let frame = RgbImage::from_pixel(20, 10, image::Rgb([9, 9, 9]));
        let full = BinaryMask::from_fn(20, 10, |_, _| true);
        assert_eq!(mask_and_crop(&frame, &full), frame);

        let mut dot = BinaryMask::new(20, 10);
        dot.set(5, 5, true);
        let crop = mask_and_crop(&frame, &dot);
        assert_eq!(crop.dimensions(), (3, 3));
        assert_eq!(crop.get_pixel(1, 1).0, [9, 9, 9]);
        assert_eq!(crop.get_pixel(0, 0).0, [0, 0, 0]);

        let half = BinaryMask::from_fn(20, 10, |x, _| x < 10);
        assert_eq!(padded_crop(&half), Some([0, 0, 10, 9]));
        let crop = mask_and_crop(&frame, &half);
        assert_eq!(crop.get_pixel(10, 3).0, [0, 0, 0]);
        assert_eq!(crop.get_pixel(9, 3).0, [9, 9, 9]);
    }

    #[test]
    fn name_cleanup() {
        let raw = vec!["Cup".to_string(), "cup".into(), "  - Ceramic Mug ".into(), "2) saucer\n\n3. Cup".into(), "".into()];
        assert_eq!(clean_names(&raw, 16), vec!["cup", "ceramic mug", "saucer"]);
        let many: Vec<String> = (0..40).map(|i| format!("thing {i}")).collect();
        assert_eq!(clean_names(&many, MAX_NAMES).len(), 16);
        assert_eq!(clean_names(&["3d printer".to_string()], 16), vec!["3d printer"]);
    }
}
