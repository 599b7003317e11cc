//! Replays the checked-in fuzz seeds, plus deterministic byte mutations of
//! them, through every parser entry point. Complements the cargo-fuzz targets
//! on toolchains without libFuzzer support.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatseg::config::PipelineConfig;
use splatseg::distill::adapter::{decode_png_base64, handle_line, parse_response};
use splatseg::distill::{clean_names, InstanceRegistry, MockEmbedder, MockVlm};
use splatseg::eval::parse_labeled_cloud;
use splatseg::masks::BinaryMask;
use splatseg::scene::ply::{parse_header, read_table};
use splatseg::scene::{parse_cameras, parse_gaussian_ply};

const MUTATIONS: usize = 300;
const INTERESTING: &[u8] = b"0\n{}[]\",9e\xff";

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files.into_iter().map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())).collect()
}

fn mutate(rng: &mut ChaCha8Rng, seed: &[u8]) -> Vec<u8> {
    let mut out = seed.to_vec();
    for _ in 0..rng.gen_range(1..4) {
        match rng.gen_range(0..4) {
            0 if !out.is_empty() => {
                let i = rng.gen_range(0..out.len());
                out[i] = rng.gen();
            }
            1 if !out.is_empty() => {
                let cut = rng.gen_range(0..out.len());
                out.truncate(cut);
            }
            2 => {
                let i = rng.gen_range(0..=out.len());
                out.insert(i, INTERESTING[rng.gen_range(0..INTERESTING.len())]);
            }
            _ if !out.is_empty() => {
                let i = rng.gen_range(0..out.len());
                let j = rng.gen_range(i..out.len());
                out.drain(i..j);
            }
            _ => {}
        }
    }
    out
}

/// Runs `f` on every seed and on mutations of it.
fn exercise(target: &str, f: impl Fn(&[u8])) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for (_, seed) in corpus(target) {
        f(&seed);
        for _ in 0..MUTATIONS {
            f(&mutate(&mut rng, &seed));
        }
    }
}

fn text(f: impl Fn(&str)) -> impl Fn(&[u8]) {
    move |bytes| {
        if let Ok(s) = std::str::from_utf8(bytes) {
            f(s)
        }
    }
}

#[test]
fn gaussian_ply() {
    exercise("gaussian_ply", |b| {
        if let Ok(g) = parse_gaussian_ply(b) {
            assert!(g.iter().all(|g| g.position.iter().chain(&g.scale).chain(&g.color).all(|v| v.is_finite())));
        }
    });
    assert_eq!(parse_gaussian_ply(&corpus("gaussian_ply")[1].1).unwrap().len(), 3);
}

#[test]
fn ply_table() {
    exercise("ply_table", |b| {
        if let Ok((header, offset)) = parse_header(b) {
            assert!(offset <= b.len());
            for e in &header.elements {
                let _ = read_table(b, &e.name);
            }
        }
    });
    let (_, list) = &corpus("ply_table")[1];
    assert_eq!(read_table(list, "vertex").unwrap().column("x").unwrap(), &[1.5]);
}

#[test]
fn cameras_json() {
    exercise("cameras_json", text(|s| drop(parse_cameras(s))));
}

#[test]
fn registry_json() {
    exercise(
        "registry_json",
        text(|s| {
            if let Ok(r) = InstanceRegistry::from_json_str(s) {
                assert_eq!(InstanceRegistry::from_json_str(&r.to_json_string()).unwrap(), r);
            }
        }),
    );
}

#[test]
fn adapter_messages() {
    exercise("adapter_response", text(|s| drop(parse_response(s))));
    let (vlm, embedder) = (MockVlm::new(), MockEmbedder::new(8));
    exercise(
        "adapter_request",
        text(|s| {
            let reply = serde_json::to_string(&handle_line(s, &vlm, &embedder)).unwrap();
            assert!(!reply.contains('\n'));
        }),
    );
    exercise("png_base64", text(|s| drop(decode_png_base64(s))));
}

#[test]
fn images_clouds_configs_names() {
    exercise("mask_image", |b| {
        if let Ok(m) = BinaryMask::decode(b) {
            assert!(m.count() <= m.len() as u64);
        }
    });
    exercise("labeled_cloud", |b| {
        if let Ok(c) = parse_labeled_cloud(b) {
            assert_eq!(c.points.len(), c.labels.len());
        }
    });
    exercise(
        "config_toml",
        text(|s| {
            let (first, rest) = s.split_once('\n').unwrap_or((s, ""));
            let overrides: Vec<String> = if first.contains('=') { vec![first.to_string()] } else { Vec::new() };
            let _ = PipelineConfig::from_toml_str(rest, &overrides);
        }),
    );
    exercise(
        "vlm_names",
        text(|s| {
            let raw: Vec<String> = s.split('\0').map(String::from).collect();
            let names = clean_names(&raw, 16);
            assert!(names.len() <= 16 && names.iter().all(|n| !n.is_empty() && !n.contains('\n')));
        }),
    );
    let (_, fixture) = &corpus("config_toml")[1];
    let s = std::str::from_utf8(fixture).unwrap();
    let (first, rest) = s.split_once('\n').unwrap();
    let config = PipelineConfig::from_toml_str(rest, &[first.to_string()]).unwrap();
    assert_eq!(config.entropy_threshold, 0.5);
}
