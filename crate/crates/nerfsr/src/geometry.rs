//! Camera models, ray generation and resolution scaling.
//!
//! Conventions, fixed globally: right-handed axes with the camera looking
//! down its local -z (Blender-style poses); pixel (i, j) samples the
//! continuous image plane at (i + 0.5, j + 0.5). Principal points are stored
//! in continuous image coordinates (a centered W x H camera has principal
//! (W/2, H/2)), which keeps `downscale_camera` a plain division and makes
//! the LR ray grid an exact sub-sampling of the HR one.

use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

const ROTATION_TOL: f64 = 1e-5;

/// Pinhole camera with a rigid camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    /// Focal lengths in pixels.
    pub focal_x: f64,
    pub focal_y: f64,
    /// Principal point in continuous image coordinates.
    pub principal_x: f64,
    pub principal_y: f64,
    /// Camera-to-world transform; upper-left 3x3 must be a rotation.
    pub pose: Matrix4<f64>,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    /// Camera with the principal point at the image center.
    pub fn centered(
        width: usize,
        height: usize,
        focal: f64,
        pose: Matrix4<f64>,
        near: f64,
        far: f64,
    ) -> Self {
        CameraModel {
            width,
            height,
            focal_x: focal,
            focal_y: focal,
            principal_x: width as f64 / 2.0,
            principal_y: height as f64 / 2.0,
            pose,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero image dimension".into()));
        }
        if !(self.focal_x > 0.0) || !(self.focal_y > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got ({}, {})",
                self.focal_x, self.focal_y
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera(format!(
                "require 0 < near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        let r = self.rotation();
        let rtr = r.transpose() * r;
        if (rtr - Matrix3::identity()).abs().max() > ROTATION_TOL {
            return Err(Error::InvalidCamera("pose rotation is not orthonormal".into()));
        }
        if (r.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidCamera("pose rotation has det != +1".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into()
    }
}

/// Camera-to-world pose looking from `eye` toward `target`.
pub fn look_at_pose(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix4<f64> {
    let forward = (target - eye).normalize();
    let x = forward.cross(&up).normalize();
    let z = -forward;
    let y = z.cross(&x);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 1>(0, 0).copy_from(&x);
    m.fixed_view_mut::<3, 1>(0, 1).copy_from(&y);
    m.fixed_view_mut::<3, 1>(0, 2).copy_from(&z);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
    m
}

/// Rays for a rectangular grid of image samples.
#[derive(Debug, Clone)]
pub struct RayBundle {
    /// [H, W, 3] scene units.
    pub origins: Array3<f64>,
    /// [H, W, 3]; unit vectors for camera bundles (NDC warping breaks unit
    /// norm by design, see [`ndc_warp`]).
    pub directions: Array3<f64>,
    pub near: f64,
    pub far: f64,
}

impl RayBundle {
    pub fn height(&self) -> usize {
        self.origins.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.origins.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat [H*W, 3] views of origins and directions, row-major.
    pub fn flat(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        let n = self.len();
        let o = self.origins.view().into_shape_with_order((n, 3)).expect("contiguous");
        let d = self.directions.view().into_shape_with_order((n, 3)).expect("contiguous");
        (o, d)
    }

    /// Selects rays by flat row-major index into a [M, 1] bundle.
    pub fn select(&self, indices: &[usize]) -> RayBundle {
        let (o, d) = self.flat();
        let mut origins = Array3::zeros((indices.len(), 1, 3));
        let mut directions = Array3::zeros((indices.len(), 1, 3));
        for (row, &i) in indices.iter().enumerate() {
            for c in 0..3 {
                origins[[row, 0, c]] = o[[i, c]];
                directions[[row, 0, c]] = d[[i, c]];
            }
        }
        RayBundle { origins, directions, near: self.near, far: self.far }
    }
}

/// Fractional pixel-index grid: the Cartesian product `ys` x `xs`.
#[derive(Debug, Clone)]
pub struct SubGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl SubGrid {
    /// Integer-pixel window of size `w` x `h` with top-left corner (x0, y0).
    pub fn window(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        SubGrid {
            xs: (x0..x0 + w).map(|v| v as f64).collect(),
            ys: (y0..y0 + h).map(|v| v as f64).collect(),
        }
    }
}

fn ray_for_sample(
    rot: &Matrix3<f64>,
    camera: &CameraModel,
    x: f64,
    y: f64,
) -> Vector3<f64> {
    let dir_cam = Vector3::new(
        (x + 0.5 - camera.principal_x) / camera.focal_x,
        -(y + 0.5 - camera.principal_y) / camera.focal_y,
        -1.0,
    );
    (rot * dir_cam).normalize()
}

/// Generates one ray per requested pixel through its half-pixel center.
///
/// With `sub = None` the full W x H grid is produced. Coordinates are pixel
/// indices (fractional allowed) and must lie in [0, W) x [0, H).
pub fn generate_rays(camera: &CameraModel, sub: Option<&SubGrid>) -> Result<RayBundle> {
    camera.validate()?;
    let full;
    let grid = match sub {
        Some(g) => {
            for &x in &g.xs {
                if !(x >= 0.0 && x < camera.width as f64) {
                    return Err(Error::InvalidArgument(format!(
                        "pixel x coordinate {x} outside [0, {})",
                        camera.width
                    )));
                }
            }
            for &y in &g.ys {
                if !(y >= 0.0 && y < camera.height as f64) {
                    return Err(Error::InvalidArgument(format!(
                        "pixel y coordinate {y} outside [0, {})",
                        camera.height
                    )));
                }
            }
            g
        }
        None => {
            full = SubGrid::window(0, 0, camera.width, camera.height);
            &full
        }
    };
    let (h, w) = (grid.ys.len(), grid.xs.len());
    let rot = camera.rotation();
    let origin = camera.translation();
    let mut origins = Array3::zeros((h, w, 3));
    let mut directions = Array3::zeros((h, w, 3));
    for (j, &y) in grid.ys.iter().enumerate() {
        for (i, &x) in grid.xs.iter().enumerate() {
            let d = ray_for_sample(&rot, camera, x, y);
            for c in 0..3 {
                origins[[j, i, c]] = origin[c];
                directions[[j, i, c]] = d[c];
            }
        }
    }
    Ok(RayBundle { origins, directions, near: camera.near, far: camera.far })
}

/// Rays through arbitrary per-pixel coordinates, `coords` shaped [h, w, 2]
/// as (x, y) pixel indices.
///
/// Unlike [`generate_rays`] the coordinates may leave the image support:
/// transformed patches (rotated/flipped augmentation) need rays slightly
/// outside the frame, which are geometrically valid pinhole rays; callers
/// mask their loss contribution instead.
pub fn generate_rays_at(camera: &CameraModel, coords: ArrayView3<'_, f64>) -> Result<RayBundle> {
    camera.validate()?;
    let (h, w, two) = coords.dim();
    if two != 2 {
        return Err(Error::Shape(format!("coords last dim must be 2, got {two}")));
    }
    let rot = camera.rotation();
    let origin = camera.translation();
    let mut origins = Array3::zeros((h, w, 3));
    let mut directions = Array3::zeros((h, w, 3));
    for j in 0..h {
        for i in 0..w {
            let d = ray_for_sample(&rot, camera, coords[[j, i, 0]], coords[[j, i, 1]]);
            for c in 0..3 {
                origins[[j, i, c]] = origin[c];
                directions[[j, i, c]] = d[c];
            }
        }
    }
    Ok(RayBundle { origins, directions, near: camera.near, far: camera.far })
}

/// Camera for the 1/ratio-resolution ray grid of the same view.
///
/// Width, height, focals and the principal point all scale by 1/ratio, which
/// under the half-pixel convention makes LR pixel (u, v) image the same ray
/// as HR continuous coordinate ((u+0.5)*ratio - 0.5, (v+0.5)*ratio - 0.5).
pub fn downscale_camera(camera: &CameraModel, ratio: usize) -> Result<CameraModel> {
    if ratio == 0 {
        return Err(Error::InvalidArgument("ratio must be positive".into()));
    }
    if camera.width % ratio != 0 || camera.height % ratio != 0 {
        return Err(Error::InvalidArgument(format!(
            "resolution {}x{} not divisible by ratio {}",
            camera.width, camera.height, ratio
        )));
    }
    let r = ratio as f64;
    Ok(CameraModel {
        width: camera.width / ratio,
        height: camera.height / ratio,
        focal_x: camera.focal_x / r,
        focal_y: camera.focal_y / r,
        principal_x: camera.principal_x / r,
        principal_y: camera.principal_y / r,
        pose: camera.pose,
        near: camera.near,
        far: camera.far,
    })
}

/// Warps a bundle into normalized device coordinates (forward-facing scenes).
///
/// Standard projective reparameterization: origins move to the z = -near
/// plane, depth maps to [-1, 1], and t in [0, 1] spans near to infinity.
/// Directions are intentionally not unit-norm afterwards.
pub fn ndc_warp(bundle: &RayBundle, camera: &CameraModel, near: f64) -> RayBundle {
    let (h, w) = (bundle.height(), bundle.width());
    let fx = camera.focal_x / (camera.width as f64 / 2.0);
    let fy = camera.focal_y / (camera.height as f64 / 2.0);
    let mut origins = Array3::zeros((h, w, 3));
    let mut directions = Array3::zeros((h, w, 3));
    for j in 0..h {
        for i in 0..w {
            let o = Vector3::new(
                bundle.origins[[j, i, 0]],
                bundle.origins[[j, i, 1]],
                bundle.origins[[j, i, 2]],
            );
            let d = Vector3::new(
                bundle.directions[[j, i, 0]],
                bundle.directions[[j, i, 1]],
                bundle.directions[[j, i, 2]],
            );
            let t = -(near + o.z) / d.z;
            let o = o + t * d;
            let o_ndc = Vector3::new(
                -fx * o.x / o.z,
                -fy * o.y / o.z,
                1.0 + 2.0 * near / o.z,
            );
            let d_ndc = Vector3::new(
                -fx * (d.x / d.z - o.x / o.z),
                -fy * (d.y / d.z - o.y / o.z),
                -2.0 * near / o.z,
            );
            for c in 0..3 {
                origins[[j, i, c]] = o_ndc[c];
                directions[[j, i, c]] = d_ndc[c];
            }
        }
    }
    RayBundle { origins, directions, near: 0.0, far: 1.0 }
}

/// Axis-aligned bounding box in scene units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half_extent: f64) -> Self {
        Aabb { min: [-half_extent; 3], max: [half_extent; 3] }
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn size(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    /// Slab-method ray intersection clipped to [t0, t1]; None when the ray
    /// misses the box entirely.
    pub fn intersect(&self, o: &[f64; 3], d: &[f64; 3], t0: f64, t1: f64) -> Option<(f64, f64)> {
        let mut lo = t0;
        let mut hi = t1;
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            lo = lo.max(ta);
            hi = hi.min(tb);
            if lo > hi {
                return None;
            }
        }
        Some((lo, hi))
    }
}
