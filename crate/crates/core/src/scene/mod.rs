//! Gaussian scene data model, pinhole cameras and their on-disk formats.

pub mod ply;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::ply::{PlyError, ScalarType};

/// Zeroth-order spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Ply { path: PathBuf, source: PlyError },
    #[error("gaussian {index}: non-finite `{property}`")]
    NonFinite { index: usize, property: &'static str },
    #[error("cameras: {0}")]
    CameraJson(String),
    #[error("duplicate camera view_id {0}")]
    DuplicateViewId(u32),
    #[error("camera {view_id}: {reason}")]
    InvalidCamera { view_id: u32, reason: String },
    #[error("synthetic scene requests zero gaussians")]
    EmptySynthetic,
}

impl SceneError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// One activated Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    pub scale: [f32; 3],
    /// Unit quaternion, (w, x, y, z).
    pub rotation: [f32; 4],
    pub opacity: f32,
    pub color: [f32; 3],
}

impl Gaussian {
    /// World-space covariance `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = rotation_matrix(self.rotation);
        let s = Vector3::new(self.scale[0] as f64, self.scale[1] as f64, self.scale[2] as f64);
        let d = Matrix3::from_diagonal(&s.component_mul(&s));
        r * d * r.transpose()
    }
}

pub fn rotation_matrix(q: [f32; 4]) -> Matrix3<f64> {
    let q = Quaternion::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64);
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

fn normalize_quat(q: [f32; 4]) -> [f32; 4] {
    let n = (q.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>()).sqrt();
    if n == 0.0 || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [
        (q[0] as f64 / n) as f32,
        (q[1] as f64 / n) as f32,
        (q[2] as f64 / n) as f32,
        (q[3] as f64 / n) as f32,
    ]
}

/// Column-wise Gaussian attributes, all of the same length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gaussians {
    positions: Vec<[f32; 3]>,
    scales: Vec<[f32; 3]>,
    rotations: Vec<[f32; 4]>,
    opacities: Vec<f32>,
    colors: Vec<[f32; 3]>,
}

impl Gaussians {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    /// Appends an already-activated Gaussian. The quaternion is renormalized
    /// and opacity clamped into `[0, 1]`.
    pub fn push(&mut self, g: Gaussian) {
        self.positions.push(g.position);
        self.scales.push(g.scale);
        self.rotations.push(normalize_quat(g.rotation));
        self.opacities.push(g.opacity.clamp(0.0, 1.0));
        self.colors.push(g.color);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            scale: self.scales[i],
            rotation: self.rotations[i],
            opacity: self.opacities[i],
            color: self.colors[i],
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = Gaussian> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn opacities(&self) -> &[f32] {
        &self.opacities
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.colors
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        self.get(i).covariance()
    }

    /// Copies the Gaussians whose index satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Gaussians {
        let mut out = Gaussians::default();
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.push(self.get(i));
        }
        out
    }
}

impl FromIterator<Gaussian> for Gaussians {
    fn from_iter<T: IntoIterator<Item = Gaussian>>(iter: T) -> Self {
        let mut out = Gaussians::default();
        for g in iter {
            out.push(g);
        }
        out
    }
}

/// Pinhole camera, OpenCV axes (x right, y down, z forward). Pixel centres
/// sit at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub view_id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_to_camera: Matrix4<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-5;

impl Camera {
    /// Camera at `eye` looking at `target` with world up `up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        view_id: u32,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        fov_x_degrees: f64,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let fx = (width as f64 / 2.0) / (fov_x_degrees.to_radians() / 2.0).tan();
        Camera {
            view_id,
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            world_to_camera: m,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Continuous pixel coordinates of a camera-space point (z must be > 0).
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let invalid = |reason: String| SceneError::InvalidCamera { view_id: self.view_id, reason };
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.world_to_camera.iter().all(|v| v.is_finite());
        if !finite {
            return Err(invalid("non-finite parameter".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("resolution must be at least 1x1".into()));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL || r.determinant() < 0.0 {
            return Err(invalid(format!("rotation block not orthonormal (error {err:.2e})")));
        }
        let bottom = self.world_to_camera.row(3);
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > ORTHONORMAL_TOL {
            return Err(invalid("last row of world_to_camera must be [0,0,0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Gaussians,
    pub cameras: Vec<Camera>,
}

impl GaussianScene {
    pub fn camera(&self, view_id: u32) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.view_id == view_id)
    }
}

// ---- PLY -------------------------------------------------------------------

const GAUSSIAN_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

/// Decodes a 3DGS checkpoint from memory. Stored values are pre-activation
/// (log-scale, logit opacity, SH DC colour); everything past degree 0 is
/// ignored.
pub fn parse_gaussian_ply(bytes: &[u8]) -> Result<Gaussians, GaussianPlyError> {
    let table = ply::read_table(bytes, "vertex")?;
    let cols = GAUSSIAN_PROPERTIES
        .iter()
        .map(|name| table.column(name))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Gaussians::with_capacity(table.rows);
    for i in 0..table.rows {
        let raw: [f64; 14] = std::array::from_fn(|k| cols[k][i]);
        if let Some(k) = raw.iter().position(|v| !v.is_finite()) {
            return Err(GaussianPlyError::NonFinite { index: i, property: GAUSSIAN_PROPERTIES[k] });
        }
        let color = |dc: f64| (0.5 + SH_C0 * dc) as f32;
        let g = Gaussian {
            position: [raw[0] as f32, raw[1] as f32, raw[2] as f32],
            color: [color(raw[3]), color(raw[4]), color(raw[5])],
            opacity: sigmoid(raw[6]) as f32,
            scale: [raw[7].exp() as f32, raw[8].exp() as f32, raw[9].exp() as f32],
            rotation: [raw[10] as f32, raw[11] as f32, raw[12] as f32, raw[13] as f32],
        };
        // Values finite in the file can still overflow f32 after activation.
        let mut activated = g.position.iter().chain(&g.color).chain([&g.opacity]).chain(&g.scale).chain(&g.rotation);
        if let Some(k) = activated.position(|v| !v.is_finite()) {
            return Err(GaussianPlyError::NonFinite { index: i, property: GAUSSIAN_PROPERTIES[k] });
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Error, PartialEq)]
pub enum GaussianPlyError {
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("gaussian {index}: non-finite `{property}`")]
    NonFinite { index: usize, property: &'static str },
}

pub fn load_ply(path: &Path) -> Result<Gaussians, SceneError> {
    let bytes = fs::read(path).map_err(|e| SceneError::io(path, e))?;
    parse_gaussian_ply(&bytes).map_err(|e| match e {
        GaussianPlyError::Ply(source) => SceneError::Ply { path: path.to_path_buf(), source },
        GaussianPlyError::NonFinite { index, property } => SceneError::NonFinite { index, property },
    })
}

pub fn encode_gaussian_ply(gaussians: &Gaussians) -> Vec<u8> {
    let props: Vec<(&str, ScalarType)> = ["x", "y", "z", "nx", "ny", "nz"]
        .iter()
        .chain(GAUSSIAN_PROPERTIES[3..].iter())
        .map(|n| (*n, ScalarType::F32))
        .collect();
    let mut out = Vec::new();
    ply::write_table(&mut out, "vertex", &props, gaussians.len(), None, |row, col| {
        let g = gaussians.get(row);
        match col {
            0..=2 => g.position[col] as f64,
            3..=5 => 0.0,
            6..=8 => (g.color[col - 6] as f64 - 0.5) / SH_C0,
            9 => logit(g.opacity as f64),
            10..=12 => (g.scale[col - 10] as f64).ln(),
            _ => g.rotation[col - 13] as f64,
        }
    })
    .expect("writing to a Vec cannot fail");
    out
}

pub fn save_ply(path: &Path, gaussians: &Gaussians) -> Result<(), SceneError> {
    fs::write(path, encode_gaussian_ply(gaussians)).map_err(|e| SceneError::io(path, e))
}

// ---- cameras JSON ------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    cameras: Vec<CameraRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraRecord {
    view_id: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    world_to_camera: Vec<f64>,
}

/// Parses and validates a cameras document; result is ordered by view_id.
pub fn parse_cameras(text: &str) -> Result<Vec<Camera>, SceneError> {
    let file: CameraFile = serde_json::from_str(text).map_err(|e| SceneError::CameraJson(e.to_string()))?;
    let mut cameras = Vec::with_capacity(file.cameras.len());
    for rec in file.cameras {
        if rec.world_to_camera.len() != 16 {
            return Err(SceneError::InvalidCamera {
                view_id: rec.view_id,
                reason: format!("world_to_camera has {} entries, expected 16", rec.world_to_camera.len()),
            });
        }
        let cam = Camera {
            view_id: rec.view_id,
            fx: rec.fx,
            fy: rec.fy,
            cx: rec.cx,
            cy: rec.cy,
            width: rec.width,
            height: rec.height,
            world_to_camera: Matrix4::from_row_slice(&rec.world_to_camera),
        };
        cam.validate()?;
        cameras.push(cam);
    }
    cameras.sort_by_key(|c| c.view_id);
    if let Some(w) = cameras.windows(2).find(|w| w[0].view_id == w[1].view_id) {
        return Err(SceneError::DuplicateViewId(w[0].view_id));
    }
    Ok(cameras)
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>, SceneError> {
    let text = fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    parse_cameras(&text).map_err(|e| match e {
        SceneError::CameraJson(msg) => SceneError::CameraJson(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let file = CameraFile {
        cameras: cameras
            .iter()
            .map(|c| CameraRecord {
                view_id: c.view_id,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                world_to_camera: c.world_to_camera.transpose().iter().copied().collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("camera records serialize")
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<(), SceneError> {
    fs::write(path, cameras_to_json(cameras)).map_err(|e| SceneError::io(path, e))
}
