//! Seeded construction of small blob scenes with known per-Gaussian labels.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Camera, Gaussian, GaussianScene, Gaussians, SceneError};

/// Low-opacity Gaussians scattered in a shell just outside a blob.
#[derive(Debug, Clone, PartialEq)]
pub struct HaloSpec {
    /// Halo count as a fraction of the blob's own count.
    pub fraction: f64,
    pub opacity: f32,
    pub gaussian_scale: f64,
    /// Shell bounds as multiples of the blob radius.
    pub inner: f64,
    pub outer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub center: [f64; 3],
    pub radius: f64,
    /// Fraction of the radius that is populated, measured inward from the
    /// surface. `1.0` fills the whole ball.
    pub shell_thickness: f64,
    pub count: usize,
    pub color: [f32; 3],
    pub opacity: f32,
    pub gaussian_scale: f64,
    pub halo: Option<HaloSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub target: [f64; 3],
    pub width: u32,
    pub height_px: u32,
    pub fov_degrees: f64,
    /// Azimuth of the first camera, degrees.
    pub phase_degrees: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub blobs: Vec<BlobSpec>,
    pub rings: Vec<CameraRing>,
    pub seed: u64,
}

/// Ground truth that comes with a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// Index of the blob each Gaussian was sampled for.
    pub object: Vec<u32>,
    /// Whether the Gaussian is an injected halo point.
    pub halo: Vec<bool>,
}

impl SyntheticTruth {
    /// Non-halo members of blob `object`.
    pub fn interior(&self, object: u32) -> Vec<u32> {
        (0..self.object.len())
            .filter(|&i| self.object[i] == object && !self.halo[i])
            .map(|i| i as u32)
            .collect()
    }

    pub fn halos(&self, object: u32) -> Vec<u32> {
        (0..self.object.len())
            .filter(|&i| self.object[i] == object && self.halo[i])
            .map(|i| i as u32)
            .collect()
    }
}

fn unit_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_quaternion(rng: &mut ChaCha8Rng) -> [f32; 4] {
    let v = loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            break v.map(|c| c / n);
        }
    };
    v.map(|c| c as f32)
}

fn sample(
    rng: &mut ChaCha8Rng,
    center: Vector3<f64>,
    r_min: f64,
    r_max: f64,
    scale: f64,
    opacity: f32,
    color: [f32; 3],
) -> Gaussian {
    // uniform in the spherical shell volume
    let lo = r_min.powi(3);
    let hi = r_max.powi(3);
    let r = (lo + rng.gen::<f64>() * (hi - lo)).cbrt();
    let p = center + unit_direction(rng) * r;
    let jitter = |rng: &mut ChaCha8Rng| (scale * rng.gen_range(0.8..1.2)) as f32;
    Gaussian {
        position: [p.x as f32, p.y as f32, p.z as f32],
        scale: [jitter(rng), jitter(rng), jitter(rng)],
        rotation: random_quaternion(rng),
        opacity,
        color,
    }
}

pub fn ring_cameras(rings: &[CameraRing]) -> Vec<Camera> {
    let mut cameras = Vec::new();
    for ring in rings {
        let target = Vector3::from(ring.target);
        for k in 0..ring.count {
            let theta = (ring.phase_degrees + 360.0 * k as f64 / ring.count as f64).to_radians();
            let eye = target + Vector3::new(ring.radius * theta.cos(), ring.radius * theta.sin(), ring.height);
            cameras.push(Camera::look_at(
                cameras.len() as u32,
                eye,
                target,
                Vector3::z(),
                ring.width,
                ring.height_px,
                ring.fov_degrees,
            ));
        }
    }
    cameras
}

/// Samples every blob (and its optional halo) and places the camera rings.
/// Identical specs give bit-identical scenes.
pub fn build_synthetic_scene(spec: &SyntheticSpec) -> Result<(GaussianScene, SyntheticTruth), SceneError> {
    let total: usize = spec.blobs.iter().map(|b| b.count).sum();
    if total == 0 {
        return Err(SceneError::EmptySynthetic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gaussians = Gaussians::with_capacity(total);
    let mut truth = SyntheticTruth { object: Vec::with_capacity(total), halo: Vec::with_capacity(total) };
    for (id, blob) in spec.blobs.iter().enumerate() {
        let center = Vector3::from(blob.center);
        let inner = blob.radius * (1.0 - blob.shell_thickness.clamp(0.0, 1.0));
        for _ in 0..blob.count {
            gaussians.push(sample(&mut rng, center, inner, blob.radius, blob.gaussian_scale, blob.opacity, blob.color));
            truth.object.push(id as u32);
            truth.halo.push(false);
        }
        if let Some(halo) = &blob.halo {
            let n = (blob.count as f64 * halo.fraction).round() as usize;
            for _ in 0..n {
                gaussians.push(sample(
                    &mut rng,
                    center,
                    blob.radius * halo.inner,
                    blob.radius * halo.outer,
                    halo.gaussian_scale,
                    halo.opacity,
                    blob.color,
                ));
                truth.object.push(id as u32);
                truth.halo.push(true);
            }
        }
    }
    let scene = GaussianScene { gaussians, cameras: ring_cameras(&spec.rings) };
    Ok((scene, truth))
}
