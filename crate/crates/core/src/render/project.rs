use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::{ALPHA_MIN, LOW_PASS, NEAR_PLANE};
use crate::scene::{Camera, Gaussians};

/// A Gaussian after projection onto one camera's image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub source_index: u32,
    /// Pixel coordinates of the projected mean.
    pub mean2d: [f64; 2],
    /// Image-space covariance `[xx, xy, yy]` in pixels², low-pass included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub base_opacity: f64,
    pub color: [f32; 3],
    /// Pixel radius beyond which the footprint is below the alpha cutoff.
    pub radius: f64,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]` clipped to the image.
    pub bbox: [u32; 4],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    pub behind: usize,
    pub outside: usize,
    pub transparent: usize,
    pub singular: usize,
}

impl ProjectionStats {
    pub fn culled(&self) -> usize {
        self.behind + self.outside + self.transparent + self.singular
    }
}

#[derive(Debug, Clone, Default)]
pub struct Projection {
    pub splats: Vec<ProjectedGaussian>,
    pub stats: ProjectionStats,
}

/// Perspective Jacobian of the pinhole projection at camera-space point `t`.
pub fn projection_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(camera.fx * iz, 0.0, -camera.fx * t.x * iz2, 0.0, camera.fy * iz, -camera.fy * t.y * iz2)
}

/// `J W Σ Wᵀ Jᵀ` plus the low-pass dilation, as `[xx, xy, yy]`.
pub fn image_covariance(camera: &Camera, cov3d: &Matrix3<f64>, t: &Vector3<f64>) -> [f64; 3] {
    let w = camera.rotation();
    let j = projection_jacobian(camera, t);
    let m = j * w;
    let c = m * cov3d * m.transpose();
    [c[(0, 0)] + LOW_PASS, 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)] + LOW_PASS]
}

pub fn project(gaussians: &Gaussians, camera: &Camera) -> Projection {
    project_where(gaussians, camera, |_| true)
}

/// Projects the Gaussians whose index passes `keep`; the rest are ignored
/// entirely (not counted in stats).
pub fn project_where(gaussians: &Gaussians, camera: &Camera, keep: impl Fn(usize) -> bool) -> Projection {
    let mut out = Projection::default();
    let rotation = camera.rotation();
    let translation = camera.translation();
    let (w, h) = (camera.width as f64, camera.height as f64);
    for i in 0..gaussians.len() {
        if !keep(i) {
            continue;
        }
        let g = gaussians.get(i);
        let p = Vector3::new(g.position[0] as f64, g.position[1] as f64, g.position[2] as f64);
        let t = rotation * p + translation;
        if t.z <= NEAR_PLANE {
            out.stats.behind += 1;
            continue;
        }
        let opacity = g.opacity as f64;
        if opacity < ALPHA_MIN {
            out.stats.transparent += 1;
            continue;
        }
        let cov = image_covariance(camera, &g.covariance(), &t);
        let det = cov[0] * cov[2] - cov[1] * cov[1];
        if det <= 1e-12 {
            out.stats.singular += 1;
            continue;
        }
        let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
        let mid = 0.5 * (cov[0] + cov[2]);
        let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
        // Outside dᵀΣ⁻¹d > 2 ln(255 α₀) the alpha falls under the skip threshold.
        let extent = (2.0 * (opacity / ALPHA_MIN).ln()).max(0.0).sqrt();
        let radius = extent * lambda_max.sqrt() * (1.0 + 1e-6) + 1e-6;
        let [mx, my] = camera.project_camera_point(&t);
        let x0 = (mx - radius).ceil().max(0.0);
        let y0 = (my - radius).ceil().max(0.0);
        let x1 = (mx + radius).floor().min(w - 1.0);
        let y1 = (my + radius).floor().min(h - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            out.stats.outside += 1;
            continue;
        }
        out.splats.push(ProjectedGaussian {
            source_index: i as u32,
            mean2d: [mx, my],
            cov2d: cov,
            conic,
            depth: t.z,
            base_opacity: opacity,
            color: g.color,
            radius,
            bbox: [x0 as u32, y0 as u32, x1 as u32, y1 as u32],
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn camera(f: f64, c: f64, size: u32) -> Camera {
        Camera { view_id: 0, fx: f, fy: f, cx: c, cy: c, width: size, height: size, world_to_camera: Matrix4::identity() }
    }

    fn one(position: [f32; 3], scale: f32) -> Gaussians {
        [Gaussian { position, scale: [scale; 3], rotation: [1.0, 0.0, 0.0, 0.0], opacity: 0.8, color: [1.0; 3] }]
            .into_iter()
            .collect()
    }

    #[test]
    fn on_axis_isotropic_covariance() {
        // Σ = I at depth d on the optical axis: J = diag(f/d, f/d) with zero third column.
        let (f, d) = (50.0, 4.0);
        let p = project(&one([0.0, 0.0, d as f32], 1.0), &camera(f, 32.0, 64));
        let s = &p.splats[0];
        let expect = (f / d) * (f / d) + LOW_PASS;
        assert_relative_eq!(s.cov2d[0], expect, epsilon = 1e-9);
        assert_relative_eq!(s.cov2d[2], expect, epsilon = 1e-9);
        assert_relative_eq!(s.cov2d[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let p = project(&one([0.0, 0.0, -1.0], 0.1), &camera(10.0, 0.0, 8));
        assert!(p.splats.is_empty());
        assert_eq!(p.stats.behind, 1);
    }

    #[test]
    fn identity_pose_projects_to_principal_point() {
        let p = project(&one([0.0, 0.0, 1.0], 0.01), &camera(1.0, 0.0, 8));
        assert_eq!(p.splats[0].mean2d, [0.0, 0.0]);
    }

    #[test]
    fn off_image_is_culled() {
        let p = project(&one([100.0, 0.0, 1.0], 0.01), &camera(10.0, 4.0, 8));
        assert_eq!(p.stats.outside, 1);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = Camera { cx: 3.0, cy: -2.0, fy: 70.0, ..camera(55.0, 0.0, 16) };
        let t = Vector3::new(0.3, -0.7, 2.5);
        let j = projection_jacobian(&cam, &t);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = t;
            let mut b = t;
            a[k] += h;
            b[k] -= h;
            let pa = cam.project_camera_point(&a);
            let pb = cam.project_camera_point(&b);
            for r in 0..2 {
                assert_relative_eq!(j[(r, k)], (pa[r] - pb[r]) / (2.0 * h), epsilon = 1e-5);
            }
        }
    }
}
