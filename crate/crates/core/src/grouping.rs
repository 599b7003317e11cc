//! Mask back-projection: every valid view of a track is rendered in weights
//! mode and each `(pixel, gaussian, w)` contribution is added to that
//! Gaussian's foreground or background total depending on the mask value at
//! the pixel. A Gaussian is foreground when its foreground total is strictly
//! larger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{BinaryMask, Granularity, MaskSet};
use crate::render::{Contribution, Rasterizer, WeightSink};
use crate::scene::{Camera, Gaussians};

#[derive(Debug, Error, PartialEq)]
pub enum GroupingError {
    #[error("{granularity} track {track_id} has no valid views")]
    NoValidViews { granularity: Granularity, track_id: u32 },
}

/// Per-view inside/outside label counts of a Gaussian centre.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCount {
    pub foreground: u32,
    pub background: u32,
}

impl LabelCount {
    pub fn total(&self) -> u32 {
        self.foreground + self.background
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAccumulator {
    /// Σ weight over mask-background pixels, per Gaussian.
    pub background: Vec<f64>,
    /// Σ weight over mask-foreground pixels, per Gaussian.
    pub foreground: Vec<f64>,
    /// Filled by the centre-projection labelling pass.
    pub label_counts: Vec<LabelCount>,
}

impl GroupAccumulator {
    pub fn zeros(n: usize) -> Self {
        Self { background: vec![0.0; n], foreground: vec![0.0; n], label_counts: vec![LabelCount::default(); n] }
    }

    pub fn len(&self) -> usize {
        self.foreground.len()
    }

    pub fn is_empty(&self) -> bool {
        self.foreground.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGroup {
    pub track_id: u32,
    pub granularity: Granularity,
    /// Sorted Gaussian indices.
    pub foreground: Vec<u32>,
    /// Sorted indices of confirmed neutral Gaussians; empty before refinement.
    pub neutral: Vec<u32>,
    pub accumulator: GroupAccumulator,
}

/// `{ j : W1(j) > W0(j) }`, ascending.
pub fn hard_assign(acc: &GroupAccumulator) -> Vec<u32> {
    acc.foreground
        .iter()
        .zip(&acc.background)
        .enumerate()
        .filter(|(_, (w1, w0))| w1 > w0)
        .map(|(j, _)| j as u32)
        .collect()
}

/// Folds one view's contributions into several tracks at once.
struct SharedPass<'a> {
    masks: Vec<(usize, &'a BinaryMask)>,
    accumulators: &'a mut [GroupAccumulator],
}

impl WeightSink for SharedPass<'_> {
    /// `(gaussian, slot, is_foreground, weight)` in contribution order.
    type Partial = Vec<(u32, u32, bool, f64)>;

    fn tile(&self, contributions: &[Contribution]) -> Self::Partial {
        let mut out = Vec::with_capacity(contributions.len() * self.masks.len());
        for c in contributions {
            for &(slot, mask) in &self.masks {
                out.push((c.gaussian, slot as u32, mask.get_index(c.pixel as usize), c.weight));
            }
        }
        out
    }

    fn merge(&mut self, partial: Self::Partial) {
        for (g, slot, fg, w) in partial {
            let acc = &mut self.accumulators[slot as usize];
            if fg {
                acc.foreground[g as usize] += w;
            } else {
                acc.background[g as usize] += w;
            }
        }
    }
}

/// Accumulates weights for many tracks, rendering each view once and folding
/// it into every track that has a valid mask there. Per-track results are
/// identical to [`accumulate_weights`]. Views are visited in `cameras` order.
pub fn accumulate_shared(
    gaussians: &Gaussians,
    cameras: &[Camera],
    tracks: &[&MaskSet],
    rasterizer: &Rasterizer,
) -> Vec<Result<GroupAccumulator, GroupingError>> {
    let n = gaussians.len();
    let mut accumulators: Vec<GroupAccumulator> = tracks.iter().map(|_| GroupAccumulator::zeros(n)).collect();
    for camera in cameras {
        let masks: Vec<(usize, &BinaryMask)> = tracks
            .iter()
            .enumerate()
            .filter_map(|(slot, t)| t.valid_mask(camera.view_id).map(|m| (slot, m)))
            .collect();
        if masks.is_empty() {
            continue;
        }
        let mut sink = SharedPass { masks, accumulators: &mut accumulators };
        rasterizer.fold_weights(gaussians, camera, &mut sink);
    }
    tracks
        .iter()
        .zip(accumulators)
        .map(|(t, acc)| {
            if t.valid_views().any(|v| cameras.iter().any(|c| c.view_id == v.view_id)) {
                Ok(acc)
            } else {
                Err(GroupingError::NoValidViews { granularity: t.granularity, track_id: t.track_id })
            }
        })
        .collect()
}

/// Foreground/background weight totals of one track over its valid views.
pub fn accumulate_weights(
    gaussians: &Gaussians,
    cameras: &[Camera],
    mask_set: &MaskSet,
    rasterizer: &Rasterizer,
) -> Result<GroupAccumulator, GroupingError> {
    accumulate_shared(gaussians, cameras, &[mask_set], rasterizer).pop().expect("one track in, one result out")
}

/// Indexes cameras by view id for lookups from mask views.
pub fn cameras_by_view(cameras: &[Camera]) -> BTreeMap<u32, &Camera> {
    cameras.iter().map(|c| (c.view_id, c)).collect()
}
