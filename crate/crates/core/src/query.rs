//! Open-vocabulary lookup against an [`InstanceRegistry`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{ClientError, EmbeddingClient, InstanceRegistry};
use crate::masks::Granularity;

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("registry holds no objects")]
    EmptyRegistry,
    #[error("query embedding has width {found}, registry has {expected}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
}

pub fn cosine(s: &[f32], q: &[f32]) -> Result<f64, QueryError> {
    debug_assert_eq!(s.len(), q.len());
    let (mut dot, mut ss, mut qq) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in s.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        ss += a * a;
        qq += b * b;
    }
    if ss == 0.0 || qq == 0.0 {
        return Err(QueryError::ZeroVector);
    }
    Ok((dot / (ss.sqrt() * qq.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub track_id: u32,
    pub granularity: Granularity,
    pub best_name: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    /// Highest similarity first.
    pub matched: Vec<Match>,
    /// Union of the matched objects' foreground sets, ascending.
    pub selected: Vec<u32>,
    /// True when nothing cleared the threshold and the best object was taken.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectParams {
    pub threshold: f64,
    pub fallback: bool,
    pub granularity: Option<Granularity>,
}

impl Default for SelectParams {
    fn default() -> Self {
        Self { threshold: 0.8, fallback: true, granularity: None }
    }
}

/// Best-scoring name of every named object passing the granularity filter.
fn score_objects(registry: &InstanceRegistry, query: &[f32], granularity: Option<Granularity>) -> Result<Vec<(usize, Match)>, QueryError> {
    if query.len() != registry.dim {
        return Err(QueryError::Dimension { expected: registry.dim, found: query.len() });
    }
    let mut out = Vec::new();
    for (i, o) in registry.objects.iter().enumerate() {
        if o.is_unnamed() || granularity.is_some_and(|g| g != o.granularity) {
            continue;
        }
        let mut best: Option<(f64, &str)> = None;
        for (name, v) in o.names.iter().zip(&o.embeddings) {
            let s = cosine(v, query)?;
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, name));
            }
        }
        if let Some((similarity, name)) = best {
            out.push((i, Match { track_id: o.track_id, granularity: o.granularity, best_name: name.to_string(), similarity }));
        }
    }
    Ok(out)
}

fn match_order(a: &Match, b: &Match) -> std::cmp::Ordering {
    b.similarity.total_cmp(&a.similarity).then(a.granularity.cmp(&b.granularity)).then(a.track_id.cmp(&b.track_id))
}

/// Selection with an already-embedded query. An object matches when any of
/// its names scores strictly above the threshold.
pub fn select_with_vector(registry: &InstanceRegistry, query: &str, vector: &[f32], params: &SelectParams) -> Result<QueryResult, QueryError> {
    if registry.is_empty() {
        return Err(QueryError::EmptyRegistry);
    }
    let scored = score_objects(registry, vector, params.granularity)?;
    if scored.is_empty() {
        log::warn!("query `{query}`: registry has no named objects");
    }
    let mut hits: Vec<(usize, Match)> = scored.iter().filter(|(_, m)| m.similarity > params.threshold).cloned().collect();
    let mut fallback = false;
    if hits.is_empty() && params.fallback {
        if let Some(best) = scored.iter().min_by(|a, b| match_order(&a.1, &b.1)) {
            hits.push(best.clone());
            fallback = true;
        }
    }
    hits.sort_by(|a, b| match_order(&a.1, &b.1));
    let mut selected: Vec<u32> = hits.iter().flat_map(|(i, _)| registry.objects[*i].foreground.iter().copied()).collect();
    selected.sort_unstable();
    selected.dedup();
    Ok(QueryResult { query: query.to_string(), matched: hits.into_iter().map(|(_, m)| m).collect(), selected, fallback })
}

/// Embeds `query` once and selects.
pub fn select(registry: &InstanceRegistry, query: &str, embedder: &dyn EmbeddingClient, params: &SelectParams) -> Result<QueryResult, QueryError> {
    let vector = embedder.embed(&[query.to_string()])?.pop().ok_or_else(|| ClientError::Protocol("no query vector".into()))?;
    select_with_vector(registry, query, &vector, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub track_id: u32,
    pub granularity: Granularity,
    /// Index into the class list, or none below the threshold.
    pub class: Option<usize>,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub classes: Vec<String>,
    pub objects: Vec<ObjectLabel>,
    /// Per-Gaussian class index.
    pub labels: Vec<Option<usize>>,
}

/// Class assignment with already-embedded class names. No fallback: an
/// object whose best class does not clear the threshold stays unlabeled.
pub fn segment_with_vectors(
    registry: &InstanceRegistry,
    classes: &[String],
    class_vectors: &[Vec<f32>],
    threshold: f64,
    gaussian_count: usize,
) -> Result<Segmentation, QueryError> {
    let mut objects = Vec::with_capacity(registry.objects.len());
    for o in &registry.objects {
        let mut best: Option<(f64, usize)> = None;
        for v in &o.embeddings {
            for (k, c) in class_vectors.iter().enumerate() {
                if c.len() != registry.dim {
                    return Err(QueryError::Dimension { expected: registry.dim, found: c.len() });
                }
                let s = cosine(v, c)?;
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, k));
                }
            }
        }
        let (similarity, class) = match best {
            Some((s, k)) if s > threshold => (s, Some(k)),
            Some((s, _)) => (s, None),
            None => (f64::NEG_INFINITY, None),
        };
        objects.push(ObjectLabel { track_id: o.track_id, granularity: o.granularity, class, similarity });
    }

    // Winner per Gaussian: higher similarity, then lower track id.
    let mut owner: Vec<Option<(f64, u32, usize)>> = vec![None; gaussian_count];
    for (o, label) in registry.objects.iter().zip(&objects) {
        let Some(class) = label.class else { continue };
        for &g in &o.foreground {
            if o.neutral.binary_search(&g).is_ok() {
                continue;
            }
            let slot = &mut owner[g as usize];
            let better = match *slot {
                None => true,
                Some((s, t, _)) => label.similarity > s || (label.similarity == s && o.track_id < t),
            };
            if better {
                *slot = Some((label.similarity, o.track_id, class));
            }
        }
    }
    Ok(Segmentation {
        classes: classes.to_vec(),
        objects,
        labels: owner.into_iter().map(|o| o.map(|(_, _, c)| c)).collect(),
    })
}

/// Embeds the class names and assigns per-Gaussian labels.
pub fn segment(
    registry: &InstanceRegistry,
    classes: &[String],
    embedder: &dyn EmbeddingClient,
    threshold: f64,
    gaussian_count: usize,
) -> Result<Segmentation, QueryError> {
    let vectors = if classes.is_empty() { Vec::new() } else { embedder.embed(classes)? };
    if vectors.len() != classes.len() {
        return Err(ClientError::Protocol(format!("{} classes embedded into {} vectors", classes.len(), vectors.len())).into());
    }
    segment_with_vectors(registry, classes, &vectors, threshold, gaussian_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{MockEmbedder, RegistryEntry};

    fn entry(track_id: u32, granularity: Granularity, names: &[&str], vectors: Vec<Vec<f32>>, fg: Vec<u32>) -> RegistryEntry {
        RegistryEntry {
            track_id,
            granularity,
            names: names.iter().map(|s| s.to_string()).collect(),
            embeddings: vectors,
            foreground: fg,
            neutral: vec![],
            top_views: vec![],
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[0.6, 0.8]).unwrap() - 0.6).abs() < 1e-7);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(QueryError::ZeroVector));
    }

    #[test]
    fn mug_example() {
        // mug = (1,0); red mug at cos 0.92; chair at cos 0.1.
        let s92 = (1.0f32 - 0.92 * 0.92).sqrt();
        let s10 = (1.0f32 - 0.01).sqrt();
        let embedder = MockEmbedder::new(2).with_vector("mug", vec![1.0, 0.0]);
        let mut r = InstanceRegistry::new(2);
        r.objects.push(entry(0, Granularity::Object, &["red mug"], vec![vec![0.92, s92]], vec![1, 2]));
        r.objects.push(entry(1, Granularity::Object, &["chair"], vec![vec![0.1, s10]], vec![3]));
        let out = select(&r, "mug", &embedder, &SelectParams::default()).unwrap();
        assert_eq!(out.matched.len(), 1);
        assert_eq!(out.matched[0].track_id, 0);
        assert!((out.matched[0].similarity - 0.92).abs() < 1e-6);
        assert_eq!(out.selected, vec![1, 2]);
        assert!(!out.fallback);

        let strict = SelectParams { threshold: 0.95, ..Default::default() };
        let out = select(&r, "mug", &embedder, &strict).unwrap();
        assert!(out.fallback);
        assert_eq!(out.selected, vec![1, 2]);
        let none = SelectParams { threshold: 0.95, fallback: false, ..Default::default() };
        assert!(select(&r, "mug", &embedder, &none).unwrap().matched.is_empty());
    }

    #[test]
    fn polysemous_union() {
        let mut r = InstanceRegistry::new(2);
        r.objects.push(entry(0, Granularity::Part, &["desk"], vec![vec![1.0, 0.0]], vec![1, 5]));
        r.objects.push(entry(0, Granularity::Object, &["desk", "table"], vec![vec![1.0, 0.0], vec![0.99, 0.1]], vec![0, 1]));
        let out = select_with_vector(&r, "desk", &[1.0, 0.0], &SelectParams::default()).unwrap();
        assert_eq!(out.matched.len(), 2);
        assert_eq!(out.selected, vec![0, 1, 5]);
        let only_parts = SelectParams { granularity: Some(Granularity::Part), ..Default::default() };
        assert_eq!(select_with_vector(&r, "desk", &[1.0, 0.0], &only_parts).unwrap().selected, vec![1, 5]);
    }

    #[test]
    fn unnamed_only_and_empty() {
        let mut r = InstanceRegistry::new(2);
        assert_eq!(select_with_vector(&r, "x", &[1.0, 0.0], &SelectParams::default()), Err(QueryError::EmptyRegistry));
        r.objects.push(entry(0, Granularity::Object, &[], vec![], vec![1]));
        let out = select_with_vector(&r, "x", &[1.0, 0.0], &SelectParams::default()).unwrap();
        assert!(out.matched.is_empty() && out.selected.is_empty());
    }

    #[test]
    fn segment_rules() {
        let classes: Vec<String> = vec!["chair".into(), "sofa".into()];
        let class_vectors = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut r = InstanceRegistry::new(2);
        r.objects.push(entry(0, Granularity::Object, &["sofa"], vec![vec![0.0, 1.0]], vec![0, 1]));
        r.objects.push(entry(1, Granularity::Object, &["lamp"], vec![vec![0.7, -0.7]], vec![2]));
        let mut with_neutral = entry(2, Granularity::Object, &["chair"], vec![vec![0.9, 0.43]], vec![1, 3, 4]);
        with_neutral.neutral = vec![4];
        r.objects.push(with_neutral);
        let seg = segment_with_vectors(&r, &classes, &class_vectors, 0.8, 6).unwrap();
        // Gaussian 1 is shared: sofa scores 1.0, chair about 0.9.
        assert_eq!(seg.labels, vec![Some(1), Some(1), None, Some(0), None, None]);
        assert_eq!(seg.objects[1].class, None);
    }

    #[test]
    fn segment_conflict_prefers_similarity_then_track() {
        let classes: Vec<String> = vec!["table".into(), "furniture".into()];
        let cv = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = |c: f32| vec![c, (1.0 - c * c).sqrt()];
        let mut r = InstanceRegistry::new(2);
        r.objects.push(entry(5, Granularity::Object, &["furniture"], vec![vec![s(0.85)[1], s(0.85)[0]]], vec![0]));
        r.objects.push(entry(7, Granularity::Object, &["table"], vec![s(0.9)], vec![0]));
        assert_eq!(segment_with_vectors(&r, &classes, &cv, 0.8, 1).unwrap().labels, vec![Some(0)]);
        let mut tie = InstanceRegistry::new(2);
        tie.objects.push(entry(9, Granularity::Object, &["table"], vec![vec![1.0, 0.0]], vec![0]));
        tie.objects.push(entry(4, Granularity::Object, &["furniture"], vec![vec![0.0, 1.0]], vec![0]));
        assert_eq!(segment_with_vectors(&tie, &classes, &cv, 0.8, 1).unwrap().labels, vec![Some(1)]);
    }
}
