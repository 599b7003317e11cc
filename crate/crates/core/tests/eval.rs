use std::collections::BTreeMap;

use proptest::collection::vec;
use proptest::prelude::*;
use splatseg::eval::{
    encode_labeled_cloud, eval_segmentation_3d, eval_selection_2d, parse_labeled_cloud, transfer_labels, LabeledCloud,
    QueryPrediction,
};
use splatseg::masks::BinaryMask;

fn mask(bits: &[bool]) -> BinaryMask {
    BinaryMask::from_fn(8, 4, |x, y| bits[(y * 8 + x) as usize])
}

fn views() -> impl Strategy<Value = BTreeMap<u32, BinaryMask>> {
    vec(vec(any::<bool>(), 32), 1..5).prop_map(|v| v.iter().enumerate().map(|(i, b)| (i as u32, mask(b))).collect())
}

fn point() -> impl Strategy<Value = [f32; 3]> {
    [-1.0f32..1.0, -1.0f32..1.0, -1.0f32..1.0]
}

fn brute_nearest(sources: &[[f32; 3]], t: &[f32; 3], radius: f64) -> Option<usize> {
    let d = |s: &[f32; 3]| (0..3).map(|k| ((s[k] - t[k]) as f64).powi(2)).sum::<f64>().sqrt();
    (0..sources.len()).filter(|&i| d(&sources[i]) <= radius).min_by(|&a, &b| d(&sources[a]).total_cmp(&d(&sources[b])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perfect_prediction_scores_one(gt in vec(views(), 1..4)) {
        let gt: BTreeMap<String, _> = gt.into_iter().enumerate().map(|(i, v)| (format!("q{i}"), v)).collect();
        let predictions: Vec<QueryPrediction> = gt.iter().map(|(q, m)| QueryPrediction { query: q.clone(), masks: m.clone() }).collect();
        let report = eval_selection_2d(&predictions, &gt).unwrap();
        for q in &report.queries {
            prop_assert_eq!(q.iou, 1.0);
        }
        if !report.queries.is_empty() {
            prop_assert_eq!(report.miou, 1.0);
        }
    }

    #[test]
    fn selection_report_ignores_prediction_order(gt in vec(views(), 1..4), pred in vec(views(), 1..4), rot in 0usize..4) {
        let gt: BTreeMap<String, _> = gt.into_iter().enumerate().map(|(i, v)| (format!("q{i}"), v)).collect();
        let predictions: Vec<QueryPrediction> =
            pred.into_iter().enumerate().map(|(i, masks)| QueryPrediction { query: format!("q{i}"), masks }).collect();
        let mut rotated = predictions.clone();
        let n = rotated.len();
        rotated.rotate_left(rot % n);
        let a = eval_selection_2d(&predictions, &gt).unwrap();
        let b = eval_selection_2d(&rotated, &gt).unwrap();
        prop_assert_eq!(a.miou.to_bits(), b.miou.to_bits());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn transfer_matches_brute_force(
        sources in vec(point(), 1..60),
        targets in vec(point(), 1..40),
        radius in 0.05f64..0.8,
    ) {
        let labels: Vec<Option<usize>> = (0..sources.len()).map(|i| (i % 5 != 0).then_some(i)).collect();
        let got = transfer_labels(&sources, &labels, &targets, radius);
        for (t, g) in targets.iter().zip(got) {
            prop_assert_eq!(g, brute_nearest(&sources, t, radius).and_then(|i| labels[i]));
        }
    }

    #[test]
    fn identical_labels_score_perfectly(pts in vec(point(), 1..80), seed in vec(0usize..3, 80)) {
        let classes: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let labels: Vec<Option<usize>> = (0..pts.len()).map(|i| Some(seed[i])).collect();
        let cloud = LabeledCloud { points: pts.clone(), labels: labels.iter().map(|l| l.unwrap() as i64).collect() };
        let report = eval_segmentation_3d(&pts, &labels, &classes, &cloud, 1e-6).unwrap();
        prop_assert_eq!(report.miou, 1.0);
        prop_assert_eq!(report.macc, 1.0);
        prop_assert_eq!(report.unlabeled_points, 0);
        prop_assert!(report.classes.iter().all(|c| c.fp == 0 && c.fn_ == 0));
    }

    #[test]
    fn labeled_cloud_round_trip(pts in vec(point(), 0..50), labels in vec(-3i64..100, 50)) {
        let cloud = LabeledCloud { labels: labels[..pts.len()].to_vec(), points: pts };
        prop_assert_eq!(parse_labeled_cloud(&encode_labeled_cloud(&cloud)).unwrap(), cloud);
    }
}

#[test]
fn unannotated_points_are_ignored() {
    let centers = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    let classes = vec!["a".to_string(), "b".to_string()];
    let cloud = LabeledCloud { points: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 5.0, 5.0]], labels: vec![0, -1, 1] };
    let report = eval_segmentation_3d(&centers, &[Some(0), Some(0)], &classes, &cloud, 0.1).unwrap();
    assert_eq!(report.gt_points, 2);
    assert_eq!(report.unlabeled_points, 1);
    let a = &report.classes[0];
    assert_eq!((a.tp, a.fp, a.fn_), (1, 0, 0));
    let b = &report.classes[1];
    assert_eq!((b.tp, b.fp, b.fn_), (0, 0, 1));
}
