//! Neutral-point refinement.
//!
//! Each Gaussian centre is projected into every valid view of a track and
//! labelled inside/outside the mask. The binary entropy of those labels flags
//! boundary candidates; candidates that are opaque are treated as solid
//! surface points and keep their initial class, the rest are neutral and are
//! removed from the foreground.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouping::{LabelCount, ObjectGroup};
use crate::masks::MaskSet;
use crate::render::NEAR_PLANE;
use crate::scene::{Camera, Gaussians};

#[derive(Debug, Error, PartialEq)]
pub enum NeutralError {
    #[error("entropy is undefined without any labelled view")]
    NoLabels,
}

/// Binary entropy (bits) of `foreground` vs `background` labels, with
/// `0·log 0 = 0`.
pub fn semantic_entropy(foreground: u32, background: u32) -> Result<f64, NeutralError> {
    let total = foreground as f64 + background as f64;
    if total == 0.0 {
        return Err(NeutralError::NoLabels);
    }
    let term = |k: u32| {
        if k == 0 {
            0.0
        } else {
            let p = k as f64 / total;
            -p * p.log2()
        }
    };
    Ok(term(foreground) + term(background))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyRecord {
    pub gaussian_index: u32,
    pub foreground: u32,
    pub background: u32,
    pub entropy: f64,
}

/// Scores every Gaussian with at least one labelled view.
pub fn entropy_records(label_counts: &[LabelCount]) -> Vec<EntropyRecord> {
    label_counts
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            semantic_entropy(c.foreground, c.background).ok().map(|entropy| EntropyRecord {
                gaussian_index: i as u32,
                foreground: c.foreground,
                background: c.background,
                entropy,
            })
        })
        .collect()
}

/// Per-Gaussian inside/outside counts from centre projections into the
/// track's valid views. Centres behind the near plane or landing outside the
/// image (after rounding to the nearest pixel) are not counted.
pub fn label_by_projection(gaussians: &Gaussians, cameras: &[Camera], mask_set: &MaskSet) -> Vec<LabelCount> {
    let views: Vec<(&Camera, &crate::masks::BinaryMask)> = cameras
        .iter()
        .filter_map(|c| mask_set.valid_mask(c.view_id).map(|m| (c, m)))
        .filter(|(c, m)| m.dimensions() == (c.width, c.height))
        .collect();
    gaussians
        .positions()
        .par_iter()
        .map(|p| {
            let p = nalgebra::Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
            let mut count = LabelCount::default();
            for (camera, mask) in &views {
                let t = camera.to_camera(&p);
                if t.z <= NEAR_PLANE {
                    continue;
                }
                let [u, v] = camera.project_camera_point(&t);
                let (x, y) = (u.round(), v.round());
                if !(x >= 0.0 && y >= 0.0 && x < camera.width as f64 && y < camera.height as f64) {
                    continue;
                }
                if mask.get(x as u32, y as u32) {
                    count.foreground += 1;
                } else {
                    count.background += 1;
                }
            }
            count
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeutralMode {
    /// Keep the hard assignment as is.
    Off,
    /// Drop every high-entropy point.
    EntropyOnly,
    /// Drop high-entropy points unless they are opaque.
    #[default]
    EntropyOpacity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeutralParams {
    pub entropy_threshold: f64,
    pub opacity_threshold: f64,
    pub mode: NeutralMode,
}

impl Default for NeutralParams {
    fn default() -> Self {
        Self { entropy_threshold: 0.6, opacity_threshold: 0.7, mode: NeutralMode::EntropyOpacity }
    }
}

/// Confirmed neutral set, ascending: entropy above the threshold and, in
/// [`NeutralMode::EntropyOpacity`], opacity not above the opacity threshold.
pub fn neutral_set(records: &[EntropyRecord], opacities: &[f32], params: &NeutralParams) -> Vec<u32> {
    if params.mode == NeutralMode::Off {
        return Vec::new();
    }
    let mut out: Vec<u32> = records
        .iter()
        .filter(|r| r.entropy > params.entropy_threshold)
        .filter(|r| {
            params.mode == NeutralMode::EntropyOnly || (opacities[r.gaussian_index as usize] as f64) <= params.opacity_threshold
        })
        .map(|r| r.gaussian_index)
        .collect();
    out.sort_unstable();
    out
}

/// Removes the confirmed neutral points from the group's foreground and
/// records them as the group's neutral set.
pub fn refine(mut group: ObjectGroup, records: &[EntropyRecord], opacities: &[f32], params: &NeutralParams) -> ObjectGroup {
    let neutral = neutral_set(records, opacities, params);
    group.foreground.retain(|i| neutral.binary_search(i).is_err());
    group.neutral = neutral;
    group
}
