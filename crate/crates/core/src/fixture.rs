//! Two-blob test scene with everything the pipeline consumes: checkpoint,
//! cameras, per-view instance masks, RGB frames, plus ground truth for
//! selection and segmentation scoring.
//!
//! Masks are visible silhouettes: a pixel belongs to an object when that
//! object's non-halo Gaussians carry more than half of the pixel's
//! compositing weight in the full render. Ground-truth selection masks are
//! renders of each object's non-halo Gaussians on their own.

use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::eval::{encode_labeled_cloud, LabeledCloud};
use crate::masks::{BinaryMask, Granularity};
use crate::pipeline::{slug, to_rgb};
use crate::render::Rasterizer;
use crate::scene::synthetic::{build_synthetic_scene, BlobSpec, CameraRing, HaloSpec, SyntheticSpec, SyntheticTruth};
use crate::scene::{cameras_to_json, encode_gaussian_ply, Camera, GaussianScene, Gaussians, SceneError};

pub const OBJECT_NAMES: [&str; 2] = ["red blob", "green blob"];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOptions {
    pub seed: u64,
    /// Gaussians per blob before halos.
    pub count: usize,
    pub image_size: u32,
    pub views_per_ring: usize,
    /// Inject low-opacity Gaussians around each blob.
    pub halos: bool,
    /// Dilate the masks of odd views by this many pixels.
    pub dilate_odd_views: u32,
}

impl FixtureOptions {
    /// Clean scene, exact masks.
    pub fn exact() -> Self {
        Self { seed: 7, count: 1500, image_size: 96, views_per_ring: 12, halos: false, dilate_odd_views: 0 }
    }

    /// Halo-injected scene with half the masks dilated by 2 px.
    pub fn halo() -> Self {
        Self { halos: true, dilate_odd_views: 2, ..Self::exact() }
    }

    pub fn spec(&self) -> SyntheticSpec {
        let halo = self.halos.then_some(HaloSpec { fraction: 0.1, opacity: 0.3, gaussian_scale: 0.06, inner: 1.1, outer: 1.3 });
        let blob = |center: [f64; 3], color: [f32; 3]| BlobSpec {
            center,
            radius: 0.45,
            shell_thickness: 0.1,
            count: self.count,
            color,
            opacity: 0.9,
            gaussian_scale: 0.035,
            halo: halo.clone(),
        };
        let ring = |height: f64, phase: f64| CameraRing {
            count: self.views_per_ring,
            radius: 3.0,
            height,
            target: [0.0, 0.0, 0.0],
            width: self.image_size,
            height_px: self.image_size,
            fov_degrees: 50.0,
            phase_degrees: phase,
        };
        SyntheticSpec {
            blobs: vec![blob([-0.6, 0.0, 0.35], [0.9, 0.1, 0.1]), blob([0.6, 0.0, -0.35], [0.1, 0.8, 0.2])],
            rings: vec![ring(2.0, 0.0), ring(-2.0, 15.0)],
            seed: self.seed,
        }
    }
}

pub struct Fixture {
    pub scene: GaussianScene,
    pub truth: SyntheticTruth,
    /// `masks[object][camera index]`, possibly empty.
    pub masks: Vec<Vec<BinaryMask>>,
    /// `gt_masks[object][camera index]`.
    pub gt_masks: Vec<Vec<BinaryMask>>,
    pub frames: Vec<RgbImage>,
}

/// Silhouette of each object as seen in the full render.
pub fn visible_masks(gaussians: &Gaussians, camera: &Camera, owner: &[Option<u32>], objects: usize) -> Vec<BinaryMask> {
    let n = camera.pixel_count();
    let mut weight = vec![vec![0.0f64; n]; objects];
    Rasterizer::sequential().for_each_contribution(gaussians, camera, |c| {
        if let Some(o) = owner[c.gaussian as usize] {
            weight[o as usize][c.pixel as usize] += c.weight;
        }
    });
    weight
        .into_iter()
        .map(|w| BinaryMask::from_fn(camera.width, camera.height, |x, y| w[(y * camera.width + x) as usize] > 0.5))
        .collect()
}

pub fn build_fixture(options: &FixtureOptions) -> Result<Fixture, SceneError> {
    build_fixture_from_spec(&options.spec(), options.dilate_odd_views)
}

/// Builds masks, frames and ground truth for an arbitrary two-object spec.
pub fn build_fixture_from_spec(spec: &SyntheticSpec, dilate_odd_views: u32) -> Result<Fixture, SceneError> {
    let (scene, truth) = build_synthetic_scene(spec)?;
    let objects = OBJECT_NAMES.len();
    let owner: Vec<Option<u32>> = (0..truth.object.len()).map(|i| (!truth.halo[i]).then_some(truth.object[i])).collect();
    let rasterizer = Rasterizer::default();
    let interiors: Vec<Vec<u32>> = (0..objects as u32).map(|o| truth.interior(o)).collect();
    let mut masks = vec![Vec::new(); objects];
    let mut gt_masks = vec![Vec::new(); objects];
    let mut frames = Vec::new();
    for camera in &scene.cameras {
        for (o, mut m) in visible_masks(&scene.gaussians, camera, &owner, objects).into_iter().enumerate() {
            if dilate_odd_views > 0 && camera.view_id % 2 == 1 {
                m = m.dilate(dilate_odd_views);
            }
            masks[o].push(m);
            gt_masks[o].push(rasterizer.render_selection(&scene.gaussians, camera, &interiors[o]));
        }
        frames.push(to_rgb(&rasterizer.render(&scene.gaussians, camera)));
    }
    Ok(Fixture { scene, truth, masks, gt_masks, frames })
}

/// Files written by [`write_fixture`].
#[derive(Debug, Clone)]
pub struct FixtureLayout {
    pub config: PathBuf,
    pub scene: PathBuf,
    pub cameras: PathBuf,
    pub mask_root: PathBuf,
    pub frames: PathBuf,
    pub gt_masks: PathBuf,
    pub gt_cloud: PathBuf,
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> SceneError {
    SceneError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

/// Writes the fixture under `dir` together with a ready-to-run config.
/// Empty masks are not written, so those views count as absent.
pub fn write_fixture(dir: &Path, fixture: &Fixture) -> Result<FixtureLayout, SceneError> {
    let layout = FixtureLayout {
        config: dir.join("splatseg.toml"),
        scene: dir.join("scene.ply"),
        cameras: dir.join("cameras.json"),
        mask_root: dir.join("masks"),
        frames: dir.join("frames"),
        gt_masks: dir.join("gt"),
        gt_cloud: dir.join("gt_cloud.ply"),
    };
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| write_err(p, e));
    let write = |p: &Path, bytes: &[u8]| std::fs::write(p, bytes).map_err(|e| write_err(p, e));
    mkdir(dir)?;
    write(&layout.scene, &encode_gaussian_ply(&fixture.scene.gaussians))?;
    write(&layout.cameras, cameras_to_json(&fixture.scene.cameras).as_bytes())?;

    for (o, per_view) in fixture.masks.iter().enumerate() {
        let track_dir = layout.mask_root.join(Granularity::Object.as_str()).join(o.to_string());
        mkdir(&track_dir)?;
        for (camera, mask) in fixture.scene.cameras.iter().zip(per_view) {
            if mask.count() > 0 {
                let p = track_dir.join(format!("{}.png", camera.view_id));
                mask.save(&p).map_err(|e| write_err(&p, e))?;
            }
        }
    }
    for (o, per_view) in fixture.gt_masks.iter().enumerate() {
        let query_dir = layout.gt_masks.join(slug(OBJECT_NAMES[o]));
        mkdir(&query_dir)?;
        for (camera, mask) in fixture.scene.cameras.iter().zip(per_view) {
            let p = query_dir.join(format!("{}.png", camera.view_id));
            mask.save(&p).map_err(|e| write_err(&p, e))?;
        }
    }
    mkdir(&layout.frames)?;
    for (camera, frame) in fixture.scene.cameras.iter().zip(&fixture.frames) {
        let p = layout.frames.join(format!("{}.png", camera.view_id));
        frame.save(&p).map_err(|e| write_err(&p, e))?;
    }

    let truth = &fixture.truth;
    let cloud = LabeledCloud {
        points: fixture.scene.gaussians.positions().to_vec(),
        labels: (0..truth.object.len()).map(|i| if truth.halo[i] { -1 } else { truth.object[i] as i64 }).collect(),
    };
    write(&layout.gt_cloud, &encode_labeled_cloud(&cloud))?;

    let names = OBJECT_NAMES.iter().map(|n| format!("\"{n}\"")).collect::<Vec<_>>().join(", ");
    let config = format!(
        "scene = \"scene.ply\"\ncameras = \"cameras.json\"\nmask_root = \"masks\"\nframes = \"frames\"\nworkdir = \"out\"\nadapter = \"mock\"\n\n[eval]\nqueries = [{names}]\ngt_masks = \"gt\"\ngt_cloud = \"gt_cloud.ply\"\nclasses = [{names}]\n"
    );
    write(&layout.config, config.as_bytes())?;
    Ok(layout)
}
