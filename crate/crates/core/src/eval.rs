//! Selection IoU on rendered 2D masks and point-level segmentation scores
//! against a labelled cloud.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{iou, BinaryMask, MaskError};
use crate::scene::ply::{self, PlyError, ScalarType};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("ground-truth cloud {path}: {source}")]
    Ply { path: String, source: PlyError },
    #[error("ground-truth cloud {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("ground-truth cloud is empty")]
    EmptyCloud,
    #[error("{found} labels for {expected} Gaussians")]
    LabelCount { expected: usize, found: usize },
}

/// Rendered selection masks of one query, by view id.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrediction {
    pub query: String,
    pub masks: BTreeMap<u32, BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view_id: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query: String,
    pub iou: f64,
    pub views: Vec<ViewScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Sorted by query text.
    pub queries: Vec<QueryScore>,
    pub miou: f64,
}

/// Order-independent mean: values are summed in sorted order so that any
/// permutation of the input yields the same bits.
fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per query, IoU averaged over the views that carry a GT mask; a view
/// where both prediction and GT are empty carries no signal and is skipped.
/// A GT view without a prediction scores as an empty prediction. Queries
/// without GT are skipped.
pub fn eval_selection_2d(
    predictions: &[QueryPrediction],
    gt: &BTreeMap<String, BTreeMap<u32, BinaryMask>>,
) -> Result<SelectionReport, EvalError> {
    let mut queries = Vec::new();
    for p in predictions {
        let Some(gt_views) = gt.get(&p.query) else {
            log::warn!("query `{}` has no ground truth; skipped", p.query);
            continue;
        };
        let mut views = Vec::new();
        for (&view_id, truth) in gt_views {
            let predicted = match p.masks.get(&view_id) {
                Some(m) => m.clone(),
                None => {
                    log::warn!("query `{}`: no prediction for view {view_id}", p.query);
                    BinaryMask::new(truth.width(), truth.height())
                }
            };
            if predicted.count() == 0 && truth.count() == 0 {
                continue;
            }
            views.push(ViewScore { view_id, iou: iou(&predicted, truth)? });
        }
        if views.is_empty() {
            log::warn!("query `{}`: no informative views; skipped", p.query);
            continue;
        }
        let score = mean(views.iter().map(|v| v.iou));
        queries.push(QueryScore { query: p.query.clone(), iou: score, views });
    }
    queries.sort_by(|a, b| a.query.cmp(&b.query));
    let miou = mean(queries.iter().map(|q| q.iou));
    Ok(SelectionReport { queries, miou })
}

/// Points with per-point class ids; negative ids mark unannotated points.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub points: Vec<[f32; 3]>,
    pub labels: Vec<i64>,
}

pub fn parse_labeled_cloud(bytes: &[u8]) -> Result<LabeledCloud, PlyError> {
    let table = ply::read_table(bytes, "vertex")?;
    let (x, y, z, l) = (table.column("x")?, table.column("y")?, table.column("z")?, table.column("label")?);
    let invalid = |row, property| PlyError::InvalidValue { element: "vertex".into(), row, property };
    let mut cloud = LabeledCloud { points: Vec::with_capacity(table.rows), labels: Vec::with_capacity(table.rows) };
    for i in 0..table.rows {
        let p = [x[i] as f32, y[i] as f32, z[i] as f32];
        if let Some(k) = p.iter().position(|v| !v.is_finite()) {
            return Err(invalid(i, ["x", "y", "z"][k]));
        }
        if l[i].fract() != 0.0 || l[i].abs() > i32::MAX as f64 {
            return Err(invalid(i, "label"));
        }
        cloud.points.push(p);
        cloud.labels.push(l[i] as i64);
    }
    Ok(cloud)
}

pub fn load_labeled_cloud(path: &Path) -> Result<LabeledCloud, EvalError> {
    let bytes = std::fs::read(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    parse_labeled_cloud(&bytes).map_err(|source| EvalError::Ply { path: path.display().to_string(), source })
}

pub fn encode_labeled_cloud(cloud: &LabeledCloud) -> Vec<u8> {
    let props = [("x", ScalarType::F32), ("y", ScalarType::F32), ("z", ScalarType::F32), ("label", ScalarType::I32)];
    let mut out = Vec::new();
    ply::write_table(&mut out, "vertex", &props, cloud.points.len(), None, |row, col| match col {
        3 => cloud.labels[row] as f64,
        c => cloud.points[row][c] as f64,
    })
    .expect("writing to a Vec cannot fail");
    out
}

/// Uniform grid over Gaussian centres with cell size equal to the search
/// radius, so a radius query touches at most 27 cells.
struct SpatialHash<'a> {
    cell: f64,
    points: &'a [[f32; 3]],
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> SpatialHash<'a> {
    fn new(points: &'a [[f32; 3]], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Self { cell, points, cells }
    }

    fn key(p: &[f32; 3], cell: f64) -> [i64; 3] {
        p.map(|c| (c as f64 / cell).floor() as i64)
    }

    /// Closest point within `radius` (inclusive), ties to the lower index.
    fn nearest(&self, q: &[f32; 3], radius: f64) -> Option<u32> {
        let k = Self::key(q, self.cell);
        let mut best: Option<(f64, u32)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else { continue };
                    for &i in ids {
                        let p = &self.points[i as usize];
                        let d2: f64 = (0..3).map(|a| (p[a] as f64 - q[a] as f64).powi(2)).sum();
                        if d2 <= radius * radius && best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && i < bi)) {
                            best = Some((d2, i));
                        }
                    }
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

/// Nearest labelled source within `radius` for every target point.
pub fn transfer_labels(sources: &[[f32; 3]], labels: &[Option<usize>], targets: &[[f32; 3]], radius: f64) -> Vec<Option<usize>> {
    if sources.is_empty() || radius <= 0.0 {
        return vec![None; targets.len()];
    }
    let hash = SpatialHash::new(sources, radius);
    targets.iter().map(|t| hash.nearest(t, radius).and_then(|i| labels[i as usize])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou: f64,
    /// None when the class has no GT points.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// Evaluated classes only, in class-list order.
    pub classes: Vec<ClassScore>,
    pub miou: f64,
    pub macc: f64,
    pub gt_points: usize,
    /// Annotated GT points that received no label.
    pub unlabeled_points: usize,
}

/// Scores per-Gaussian labels against `cloud`. Each annotated GT point takes
/// the label of the nearest Gaussian centre within `radius`; no neighbour or
/// an unlabeled neighbour counts as a miss. Classes with neither GT points
/// nor predictions are left out of the means.
pub fn eval_segmentation_3d(
    centers: &[[f32; 3]],
    labels: &[Option<usize>],
    classes: &[String],
    cloud: &LabeledCloud,
    radius: f64,
) -> Result<SegmentationReport, EvalError> {
    if labels.len() != centers.len() {
        return Err(EvalError::LabelCount { expected: centers.len(), found: labels.len() });
    }
    if cloud.points.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let predicted = transfer_labels(centers, labels, &cloud.points, radius);
    let n = classes.len();
    let (mut tp, mut fp, mut fn_) = (vec![0u64; n], vec![0u64; n], vec![0u64; n]);
    let mut gt_points = 0;
    let mut unlabeled = 0;
    for (&truth, pred) in cloud.labels.iter().zip(&predicted) {
        let truth = (truth >= 0 && (truth as usize) < n).then_some(truth as usize);
        let Some(t) = truth else { continue };
        gt_points += 1;
        match *pred {
            Some(p) if p == t => tp[t] += 1,
            Some(p) => {
                fn_[t] += 1;
                if p < n {
                    fp[p] += 1;
                }
            }
            None => {
                fn_[t] += 1;
                unlabeled += 1;
            }
        }
    }
    let scores: Vec<ClassScore> = (0..n)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| ClassScore {
            class: classes[c].clone(),
            tp: tp[c],
            fp: fp[c],
            fn_: fn_[c],
            iou: tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64,
            accuracy: (tp[c] + fn_[c] > 0).then(|| tp[c] as f64 / (tp[c] + fn_[c]) as f64),
        })
        .collect();
    Ok(SegmentationReport {
        miou: mean(scores.iter().map(|s| s.iou)),
        macc: mean(scores.iter().filter_map(|s| s.accuracy)),
        classes: scores,
        gt_points,
        unlabeled_points: unlabeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn selection_identity_and_empty_prediction() {
        let m = BinaryMask::from_fn(8, 8, |x, y| x + y < 6);
        let gt: BTreeMap<_, _> = [("a".to_string(), BTreeMap::from([(0, m.clone()), (1, m.clone())]))].into();
        let same = QueryPrediction { query: "a".into(), masks: BTreeMap::from([(0, m.clone()), (1, m.clone())]) };
        assert_eq!(eval_selection_2d(&[same], &gt).unwrap().miou, 1.0);
        let empty = QueryPrediction { query: "a".into(), masks: BTreeMap::new() };
        assert_eq!(eval_selection_2d(&[empty], &gt).unwrap().miou, 0.0);
    }

    #[test]
    fn both_empty_views_are_skipped() {
        let m = BinaryMask::from_fn(4, 4, |x, _| x == 0);
        let blank = BinaryMask::new(4, 4);
        let gt: BTreeMap<_, _> = [("a".to_string(), BTreeMap::from([(0, m.clone()), (1, blank.clone())]))].into();
        let p = QueryPrediction { query: "a".into(), masks: BTreeMap::from([(0, m), (1, blank)]) };
        let r = eval_selection_2d(&[p], &gt).unwrap();
        assert_eq!(r.queries[0].views.len(), 1);
        assert_eq!(r.miou, 1.0);
    }

    fn line_cloud(labels: &[i64]) -> LabeledCloud {
        LabeledCloud { points: (0..labels.len()).map(|i| [i as f32, 0.0, 0.0]).collect(), labels: labels.to_vec() }
    }

    #[test]
    fn perfect_and_unlabeled_segmentation() {
        let cloud = line_cloud(&[0, 0, 1, 1, -1]);
        let labels = vec![Some(0), Some(0), Some(1), Some(1), None];
        let r = eval_segmentation_3d(&cloud.points, &labels, &names(2), &cloud, 0.05).unwrap();
        assert_eq!((r.miou, r.macc), (1.0, 1.0));
        let r = eval_segmentation_3d(&cloud.points, &[None; 5], &names(2), &cloud, 0.05).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.unlabeled_points, 4);
    }

    #[test]
    fn ten_point_half_wrong() {
        // Class 0: five points all correct. Class 1: five points all predicted 0.
        // IoU0 = 5 / (5 + 5 + 0) = 0.5, IoU1 = 0, so mIoU = 0.25 = 0.5 * IoU0.
        let cloud = line_cloud(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let labels = vec![Some(0); 10];
        let r = eval_segmentation_3d(&cloud.points, &labels, &names(2), &cloud, 0.05).unwrap();
        assert_eq!(r.classes[0].iou, 0.5);
        assert_eq!(r.classes[1].iou, 0.0);
        assert_eq!(r.miou, 0.25);
        assert_eq!(r.macc, 0.5);
    }

    #[test]
    fn absent_classes_excluded() {
        let cloud = line_cloud(&[0, 0]);
        let r = eval_segmentation_3d(&cloud.points, &[Some(0), Some(0)], &names(3), &cloud, 0.05).unwrap();
        assert_eq!(r.classes.len(), 1);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn transfer_respects_radius_and_ties() {
        let sources = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.1, 0.0, 0.0]];
        let labels = [Some(0), Some(1), Some(2)];
        let out = transfer_labels(&sources, &labels, &[[0.04, 0.0, 0.0], [0.09, 0.0, 0.0], [0.5, 0.0, 0.0]], 0.05);
        assert_eq!(out, vec![Some(0), Some(1), None]);
    }

    #[test]
    fn cloud_round_trip() {
        let cloud = LabeledCloud { points: vec![[0.5, -1.0, 2.0], [0.0; 3]], labels: vec![3, -1] };
        assert_eq!(parse_labeled_cloud(&encode_labeled_cloud(&cloud)).unwrap(), cloud);
    }
}
