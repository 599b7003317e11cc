//! Contracts for the captioning and text-embedding models, plus deterministic
//! in-process mocks.

use std::collections::HashMap;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::masks::Granularity;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("adapter unreachable: {0}")]
    Unreachable(String),
    #[error("adapter protocol error: {0}")]
    Protocol(String),
    #[error("adapter error [{code}]: {message}")]
    Remote { code: String, message: String },
    #[error("model returned no usable names")]
    NoNames,
}

/// What the captioner sees for one object.
pub struct DescribeRequest<'a> {
    pub track_id: u32,
    pub granularity: Granularity,
    pub prompt: &'a str,
    pub images: &'a [RgbImage],
}

pub trait VlmClient: Send + Sync {
    /// Candidate names for the object shown in `request.images`.
    fn describe(&self, request: &DescribeRequest<'_>) -> Result<Vec<String>, ClientError>;
}

pub trait EmbeddingClient: Send + Sync {
    fn dim(&self) -> usize;
    /// One unit-norm vector per input text, in order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError>;
    /// Whether concurrent calls are allowed.
    fn concurrent(&self) -> bool {
        true
    }
}

const PALETTE: [(&str, [f32; 3]); 9] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.9, 0.85, 0.1]),
    ("cyan", [0.1, 0.8, 0.85]),
    ("magenta", [0.85, 0.1, 0.8]),
    ("orange", [0.95, 0.5, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.45, 0.45, 0.45]),
];

/// Mean colour of the non-black pixels, if any.
pub fn mean_foreground_color(images: &[RgbImage]) -> Option<[f32; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0u64;
    for img in images {
        for p in img.pixels() {
            if p.0 != [0, 0, 0] {
                for (s, &v) in sum.iter_mut().zip(&p.0) {
                    *s += v as f64 / 255.0;
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum.map(|s| (s / n as f64) as f32))
}

/// Names objects by the palette colour closest to their mean masked colour,
/// or from a fixed per-track table when one is given.
#[derive(Debug, Clone, Default)]
pub struct MockVlm {
    table: HashMap<(Granularity, u32), Vec<String>>,
}

impl MockVlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_names(mut self, granularity: Granularity, track_id: u32, names: &[&str]) -> Self {
        self.table.insert((granularity, track_id), names.iter().map(|s| s.to_string()).collect());
        self
    }
}

impl VlmClient for MockVlm {
    fn describe(&self, request: &DescribeRequest<'_>) -> Result<Vec<String>, ClientError> {
        if let Some(names) = self.table.get(&(request.granularity, request.track_id)) {
            return Ok(names.clone());
        }
        let mean = mean_foreground_color(request.images).ok_or(ClientError::NoNames)?;
        let (color, _) = PALETTE
            .iter()
            .map(|(name, c)| (*name, (0..3).map(|k| (c[k] - mean[k]).powi(2)).sum::<f32>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("palette is non-empty");
        Ok(vec![format!("{color} blob"), format!("{color} object"), format!("{color} sphere")])
    }
}

/// Deterministic bag-of-words embedder: each lowercase token maps to a fixed
/// pseudo-random direction; a text is the normalized sum of its tokens.
/// Texts can be pinned to explicit vectors.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    dictionary: HashMap<String, Vec<f32>>,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim, seed: 0, dictionary: HashMap::new() }
    }

    /// Changes every token direction; seed 0 is the default vocabulary.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Pins `text` to `vector` (normalized on use).
    pub fn with_vector(mut self, text: &str, vector: Vec<f32>) -> Self {
        assert_eq!(vector.len(), self.dim, "dictionary vector has wrong dimension");
        self.dictionary.insert(text.to_string(), vector);
        self
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn embed_one(&self, text: &str) -> Vec<f32> {
        if let Some(v) = self.dictionary.get(text) {
            return normalize(v.iter().map(|&x| x as f64).collect());
        }
        let lower = text.to_lowercase();
        let mut acc = vec![0.0f64; self.dim];
        let mut any = false;
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            for (a, t) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += t;
            }
            any = true;
        }
        if !any {
            acc = self.token_vector(&format!("\u{0}{text}"));
        }
        normalize(acc)
    }
}

fn normalize(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.into_iter().map(|x| x as f32).collect();
    }
    v.into_iter().map(|x| (x / n) as f32).collect()
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl EmbeddingClient for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
