//! Pinhole cameras, ray generation and pose interpolation.
//!
//! Conventions: right-handed world with +z up; cameras look down their local
//! −z axis with +x right and +y up; image coordinates have `u` growing to the
//! right and `v` growing downwards, with pixel `(i, j)` covering
//! `[i, i+1) × [j, j+1)`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::Input(format!(
                "focal length must be positive, got {focal}"
            )));
        }
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return Err(Error::Input(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            focal,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Centered principal point and the focal length giving a horizontal
    /// field of view of `fov_x_deg`.
    pub fn from_fov(width: u32, height: u32, fov_x_deg: f64) -> Result<Self> {
        let focal = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(
            focal,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
        )
    }

    /// Same camera at a different resolution, keeping the field of view.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            focal: self.focal * sx,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram_err = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        if gram_err.is_nan() || gram_err > ORTHONORMAL_TOL {
            return Err(Error::Input(format!(
                "rotation is not orthonormal (|RᵀR − I| = {gram_err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Input(format!("rotation has determinant {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Camera at `eye` looking at `target`, with `up` projected to image-up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let back = eye - target;
        if back.norm() < 1e-12 {
            return Err(Error::Input("look_at eye coincides with target".into()));
        }
        let z = back.normalize();
        let x = up.cross(&z);
        if x.norm() < 1e-9 {
            return Err(Error::Input(
                "look_at up vector parallel to view axis".into(),
            ));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), eye)
    }

    /// Parses 16 row-major reals of a 4×4 camera-to-world matrix.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::Input(format!(
                "pose needs 16 values, got {}",
                m.len()
            )));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > ORTHONORMAL_TOL)
        {
            return Err(Error::Input(format!(
                "pose bottom row {bottom:?} is not [0,0,0,1]"
            )));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(r, Vector3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
            0.0,
            0.0,
            0.0,
            1.0,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Keeps the position and turns the camera to face `target`.
    pub fn aimed_at(&self, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        Self::look_at(self.translation, target, up)
    }
}

/// A ray `r(t) = o + t·d` restricted to `[near, far]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Sphere around the origin that encloses the scene; sets ray bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub radius: f64,
    /// Lower limit on `near` for cameras inside or near the bounds.
    pub min_near: f64,
}

impl Default for SceneBounds {
    /// The sphere circumscribing the cube `[−1, 1]³`.
    fn default() -> Self {
        Self {
            radius: 3f64.sqrt(),
            min_near: 0.05,
        }
    }
}

impl SceneBounds {
    /// `[near, far]` covering every point of the bounds from `origin`,
    /// for any direction.
    pub fn ray_interval(&self, origin: &Vector3<f64>) -> (f64, f64) {
        let dist = origin.norm();
        let near = (dist - self.radius).max(self.min_near);
        let far = (dist + self.radius).max(near + self.min_near);
        (near, far)
    }
}

/// Ray through the continuous pixel position `(u, v)`.
pub fn generate_ray(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    pixel: (f64, f64),
    bounds: &SceneBounds,
) -> Result<Ray> {
    let (u, v) = pixel;
    if !(0.0..intr.width as f64).contains(&u) || !(0.0..intr.height as f64).contains(&v) {
        return Err(Error::Input(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            intr.width, intr.height
        )));
    }
    Ok(ray_unchecked(intr, pose, pixel, bounds))
}

fn ray_unchecked(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    (u, v): (f64, f64),
    bounds: &SceneBounds,
) -> Ray {
    let cam = Vector3::new(
        (u - intr.cx) / intr.focal,
        -(v - intr.cy) / intr.focal,
        -1.0,
    );
    let direction = (pose.rotation * cam).normalize();
    let origin = pose.translation;
    let (near, far) = bounds.ray_interval(&origin);
    Ray {
        origin,
        direction,
        near,
        far,
    }
}

/// Rays through the centers of every pixel, in row-major order.
pub fn generate_image_rays(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    bounds: &SceneBounds,
) -> Vec<Ray> {
    let (w, h) = (intr.width, intr.height);
    let mut rays = Vec::with_capacity((w * h) as usize);
    for j in 0..h {
        for i in 0..w {
            rays.push(ray_unchecked(
                intr,
                pose,
                (i as f64 + 0.5, j as f64 + 0.5),
                bounds,
            ));
        }
    }
    rays
}

/// An `S×S` lattice of rays covering the full image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRays {
    pub size: usize,
    /// Row-major: index `row * size + col`.
    pub rays: Vec<Ray>,
    pub pixels: Vec<(f64, f64)>,
}

/// Splits the image into `S×S` equal cells and places one ray per cell, at
/// the cell center or, when `jitter_seed` is set, uniformly within the cell.
pub fn generate_grid_rays(
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    size: usize,
    jitter_seed: Option<u64>,
    bounds: &SceneBounds,
) -> Result<GridRays> {
    if size < 2 {
        return Err(Error::Input(format!(
            "grid size must be at least 2, got {size}"
        )));
    }
    let cell_w = intr.width as f64 / size as f64;
    let cell_h = intr.height as f64 / size as f64;
    let mut rng = jitter_seed.map(ChaCha8Rng::seed_from_u64);
    let mut rays = Vec::with_capacity(size * size);
    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let (fu, fv) = match rng.as_mut() {
                Some(r) => (r.random::<f64>(), r.random::<f64>()),
                None => (0.5, 0.5),
            };
            // Clamp guards the open upper image edge against rounding.
            let u = ((col as f64 + fu) * cell_w).min(next_down(intr.width as f64));
            let v = ((row as f64 + fv) * cell_h).min(next_down(intr.height as f64));
            pixels.push((u, v));
            rays.push(ray_unchecked(intr, pose, (u, v), bounds));
        }
    }
    Ok(GridRays { size, rays, pixels })
}

fn next_down(x: f64) -> f64 {
    f64::from_bits(x.to_bits() - 1)
}

/// Spherical interpolation of rotation (shorter arc) and linear
/// interpolation of translation.
pub fn interpolate_pose(a: &CameraPose, b: &CameraPose, t: f64) -> Result<CameraPose> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!(
            "interpolation parameter {t} outside [0, 1]"
        )));
    }
    if t == 0.0 {
        return Ok(*a);
    }
    if t == 1.0 {
        return Ok(*b);
    }
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(a.rotation));
    let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(b.rotation));
    let mut rel = qa.inverse() * qb;
    if rel.w < 0.0 {
        rel = UnitQuaternion::new_unchecked(-rel.into_inner());
    }
    let q = qa * UnitQuaternion::from_scaled_axis(rel.scaled_axis() * t);
    let translation = a.translation * (1.0 - t) + b.translation * t;
    // Re-orthonormalize to keep the invariant tight after float round-off.
    let r = q.to_rotation_matrix().into_inner();
    let r = Rotation3::from_matrix(&r).into_inner();
    CameraPose::new(r, translation)
}

/// Random novel view: two uniformly chosen poses interpolated at uniform `t`
/// and turned to face `target`.
pub fn random_view<R: Rng + ?Sized>(
    poses: &[CameraPose],
    target: Vector3<f64>,
    up: Vector3<f64>,
    rng: &mut R,
) -> Result<CameraPose> {
    if poses.is_empty() {
        return Err(Error::Input("no poses to interpolate".into()));
    }
    let a = &poses[rng.random_range(0..poses.len())];
    let b = &poses[rng.random_range(0..poses.len())];
    let t = rng.random::<f64>();
    let p = interpolate_pose(a, b, t)?;
    match p.aimed_at(target, up) {
        Ok(aimed) => Ok(aimed),
        // Interpolated position at the target or straight above it; keep the
        // interpolated orientation.
        Err(_) => Ok(p),
    }
}
