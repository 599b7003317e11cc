//! Reference implementations for tests: a brute-force splatting oracle that
//! shades every pixel against every Gaussian (no tiling, no culling, no
//! bounding boxes) and small scene generators.

#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatseg::masks::{Granularity, MaskSet, ViewMask};
use splatseg::scene::{Camera, Gaussian, Gaussians};

pub struct OracleSplat {
    pub index: u32,
    pub depth: f64,
    pub mean: Vector2<f64>,
    pub inv_cov: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Orthonormal rotation from a (w, x, y, z) quaternion, normalised here.
fn quat_to_matrix(q: [f32; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|c| c as f64 / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub fn oracle_project(g: &Gaussian, index: u32, camera: &Camera) -> Option<OracleSplat> {
    let w = camera.world_to_camera;
    let r = Matrix3::new(w[(0, 0)], w[(0, 1)], w[(0, 2)], w[(1, 0)], w[(1, 1)], w[(1, 2)], w[(2, 0)], w[(2, 1)], w[(2, 2)]);
    let t = Vector3::new(w[(0, 3)], w[(1, 3)], w[(2, 3)]);
    let p = r * Vector3::new(g.position[0] as f64, g.position[1] as f64, g.position[2] as f64) + t;
    if p.z <= 0.01 {
        return None;
    }
    let rot = quat_to_matrix(g.rotation);
    let s = Matrix3::from_diagonal(&Vector3::new(g.scale[0] as f64, g.scale[1] as f64, g.scale[2] as f64));
    let sigma = rot * s * s * rot.transpose();
    let (x, y, z) = (p.x, p.y, p.z);
    let j = nalgebra::Matrix2x3::new(camera.fx / z, 0.0, -camera.fx * x / (z * z), 0.0, camera.fy / z, -camera.fy * y / (z * z));
    let cov = j * r * sigma * r.transpose() * j.transpose() + Matrix2::identity() * 0.3;
    let inv_cov = cov.try_inverse()?;
    Some(OracleSplat {
        index,
        depth: z,
        mean: Vector2::new(camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy),
        inv_cov,
        opacity: g.opacity as f64,
        color: g.color.map(|c| c as f64),
    })
}

pub struct OracleImage {
    pub width: u32,
    pub height: u32,
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    /// Per pixel: `(gaussian, weight)` in compositing order.
    pub weights: Vec<Vec<(u32, f64)>>,
}

/// Front-to-back compositing of every Gaussian at every pixel centre.
pub fn oracle_render(gaussians: &Gaussians, camera: &Camera) -> OracleImage {
    let mut splats: Vec<OracleSplat> =
        gaussians.iter().enumerate().filter_map(|(i, g)| oracle_project(&g, i as u32, camera)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let n = (camera.width * camera.height) as usize;
    let mut out = OracleImage {
        width: camera.width,
        height: camera.height,
        color: vec![[0.0; 3]; n],
        alpha: vec![0.0; n],
        weights: vec![Vec::new(); n],
    };
    for py in 0..camera.height {
        for px in 0..camera.width {
            let k = (py * camera.width + px) as usize;
            let mut transmittance = 1.0f64;
            for s in &splats {
                let d = Vector2::new(px as f64, py as f64) - s.mean;
                let power = -0.5 * (d.transpose() * s.inv_cov * d)[(0, 0)];
                let alpha = (s.opacity * power.exp()).min(0.99);
                if alpha < 1.0 / 255.0 {
                    continue;
                }
                let w = alpha * transmittance;
                for c in 0..3 {
                    out.color[k][c] += w * s.color[c];
                }
                out.weights[k].push((s.index, w));
                transmittance *= 1.0 - alpha;
                if transmittance < 1e-4 {
                    break;
                }
            }
            out.alpha[k] = 1.0 - transmittance;
        }
    }
    out
}

pub fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
    let q: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let q = if q.iter().all(|c| c.abs() < 1e-3) { [1.0, 0.0, 0.0, 0.0] } else { q };
    Gaussian {
        position: [rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.0..1.0)],
        scale: std::array::from_fn(|_| rng.gen_range(0.005..0.25)),
        rotation: q,
        opacity: rng.gen_range(0.02..1.0),
        color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
    }
}

/// Up to `max` random Gaussians around the origin and a camera looking at
/// it from a random direction; some Gaussians end up behind the camera or
/// outside the frame.
pub fn random_scene(seed: u64, max: usize, size: u32) -> (Gaussians, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max);
    let gaussians: Gaussians = (0..n).map(|_| random_gaussian(&mut rng)).collect();
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let dist: f64 = rng.gen_range(1.5..3.5);
    let eye = Vector3::new(dist * theta.cos(), dist * theta.sin(), rng.gen_range(-1.0..1.0));
    let camera = Camera::look_at(0, eye, Vector3::zeros(), Vector3::z(), size, size, rng.gen_range(40.0..80.0));
    (gaussians, camera)
}

/// Fixture masks turned into one object-level track per blob.
pub fn fixture_tracks(fixture: &splatseg::fixture::Fixture) -> Vec<MaskSet> {
    fixture
        .masks
        .iter()
        .enumerate()
        .map(|(o, per_view)| {
            let views = fixture
                .scene
                .cameras
                .iter()
                .zip(per_view)
                .map(|(c, m)| if m.count() > 0 { ViewMask::present(c.view_id, m.clone(), None) } else { ViewMask::absent(c.view_id) })
                .collect();
            MaskSet::new(Granularity::Object, o as u32, views)
        })
        .collect()
}

pub fn sorted_intersection(a: &[u32], b: &[u32]) -> usize {
    a.iter().filter(|x| b.binary_search(x).is_ok()).count()
}
