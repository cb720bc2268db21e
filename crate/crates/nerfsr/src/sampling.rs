//! Patch extraction for paired LR/HR training.
//!
//! Training draws square HR patches (grid-aligned or uniformly random), pairs
//! each with the LR ray bundle imaging the same region, and optionally applies
//! an in-plane rotation/flip augmentation to both members of the pair. The
//! LR/HR correspondence follows the half-pixel convention throughout: LR ray
//! (u, v) of a patch looks through HR coordinate
//! `origin + ((u+0.5)r - 0.5, (v+0.5)r - 0.5)`.

use crate::geometry::{downscale_camera, generate_rays_at, CameraModel, RayBundle};
use crate::sr::resize::bilinear_resize;
use crate::{Error, Result};
use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Largest rotation magnitude accepted before the out-of-support mask would
/// dominate the patch.
pub const MAX_ROTATION_DEG: f64 = 45.0;

/// In-plane patch transform: rotation about the patch center (degrees,
/// positive values rotate source content clockwise in image coordinates)
/// composed with an optional horizontal flip of the output coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub rotation_degrees: f64,
    pub hflip: bool,
}

impl Transform {
    pub fn identity() -> Self {
        Transform { rotation_degrees: 0.0, hflip: false }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_degrees == 0.0 && !self.hflip
    }

    /// Source coordinate sampled for output patch-local (row, col), patch
    /// side `p`. The map is `source = c + R(theta) * F^hflip * (output - c)`
    /// about the patch center `c = (p-1)/2`.
    fn source_of(&self, row: f64, col: f64, p: usize) -> (f64, f64) {
        let c = (p as f64 - 1.0) / 2.0;
        let col = if self.hflip { (p as f64 - 1.0) - col } else { col };
        let (sin, cos) = self.rotation_degrees.to_radians().sin_cos();
        let (dy, dx) = (row - c, col - c);
        (c + sin * dx + cos * dy, c + cos * dx - sin * dy)
    }

    /// The single transform equivalent to applying `self` first and `next`
    /// on the result. Rotations and horizontal flips are closed under
    /// composition: `R(a)F^f . R(b)F^g = R(a - b)F^(1 xor g)` when `f` is a
    /// flip, `R(a + b)F^g` otherwise.
    pub fn then(self, next: Transform) -> Transform {
        Transform {
            rotation_degrees: if self.hflip {
                self.rotation_degrees - next.rotation_degrees
            } else {
                self.rotation_degrees + next.rotation_degrees
            },
            hflip: self.hflip != next.hflip,
        }
    }
}

/// Where a training patch sits in its HR image and how it was transformed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// (row, col) of the top-left HR pixel.
    pub origin: (usize, usize),
    /// Side length P in HR pixels.
    pub size: usize,
    /// LR-to-HR upscaling ratio r; P must be divisible by it.
    pub ratio: u32,
    /// Augmentation applied to the pair, if any.
    pub transform: Option<Transform>,
}

impl PatchSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.size == 0 || self.ratio == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {} and ratio {} must be positive",
                self.size, self.ratio
            )));
        }
        if self.size % self.ratio as usize != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {} not divisible by ratio {}",
                self.size, self.ratio
            )));
        }
        if self.origin.0 + self.size > height || self.origin.1 + self.size > width {
            return Err(Error::InvalidArgument(format!(
                "patch at {:?} size {} exceeds the {height}x{width} image",
                self.origin, self.size
            )));
        }
        Ok(())
    }

    /// Side length of the LR member, P / r.
    pub fn lr_size(&self) -> usize {
        self.size / self.ratio as usize
    }
}

/// One aligned LR/HR training sample.
#[derive(Debug, Clone)]
pub struct PatchPair {
    /// [P/r, P/r] rays through the LR pixel centers of the patch.
    pub lr_rays: RayBundle,
    /// [P, P, 3] ground-truth HR crop (transformed when augmented).
    pub hr_target: Array3<f64>,
    /// [P, P] false where augmentation left the patch support; the loss skips
    /// those pixels. All true for untransformed pairs.
    pub mask: Array2<bool>,
    /// [P/r, P/r, 3] bilinear downsample of `hr_target`, for warm-up and
    /// diagnostics.
    pub lr_target: Array3<f64>,
    pub spec: PatchSpec,
}

fn check_patch_request(height: usize, width: usize, size: usize, ratio: u32) -> Result<()> {
    PatchSpec { origin: (0, 0), size, ratio, transform: None }.validate(height, width)
}

fn axis_origins(extent: usize, size: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..extent / size).map(|k| k * size).collect();
    if extent % size != 0 {
        // Shift-to-fit: anchor one final patch at the border so the union
        // covers every pixel while all patches keep the same size.
        origins.push(extent - size);
    }
    origins
}

/// Row-major grid tiling of an H x W image with side-P patches. Origins sit
/// at multiples of P; when an axis is not divisible by P a final patch is
/// anchored at the border (overlapping its neighbor), so the union covers the
/// image exactly.
pub fn grid_patches(height: usize, width: usize, size: usize, ratio: u32) -> Result<Vec<PatchSpec>> {
    check_patch_request(height, width, size, ratio)?;
    let rows = axis_origins(height, size);
    let cols = axis_origins(width, size);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push(PatchSpec { origin: (r, c), size, ratio, transform: None });
        }
    }
    Ok(out)
}

/// Draws a patch origin uniformly from the integer lattice
/// [0, H-P] x [0, W-P]; draws are independent across calls.
pub fn random_patch(
    height: usize,
    width: usize,
    size: usize,
    ratio: u32,
    rng: &mut ChaCha8Rng,
) -> Result<PatchSpec> {
    check_patch_request(height, width, size, ratio)?;
    let row = rng.gen_range(0..=height - size);
    let col = rng.gen_range(0..=width - size);
    Ok(PatchSpec { origin: (row, col), size, ratio, transform: None })
}

/// Bilinear sample with clamped taps; callers decide validity separately.
fn sample_bilinear(img: &ArrayView3<'_, f64>, row: f64, col: f64, out: &mut [f64]) {
    let (h, w, channels) = img.dim();
    let r0 = (row.floor() as isize).clamp(0, h as isize - 2).max(0) as usize;
    let c0 = (col.floor() as isize).clamp(0, w as isize - 2).max(0) as usize;
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let fr = (row - r0 as f64).clamp(0.0, 1.0);
    let fc = (col - c0 as f64).clamp(0.0, 1.0);
    for ch in 0..channels {
        out[ch] = (1.0 - fr) * (1.0 - fc) * img[[r0, c0, ch]]
            + (1.0 - fr) * fc * img[[r0, c1, ch]]
            + fr * (1.0 - fc) * img[[r1, c0, ch]]
            + fr * fc * img[[r1, c1, ch]];
    }
}

/// Resamples a square [P, P, C] patch under `transform`. Returns the warped
/// patch and a validity mask; output pixels whose source coordinate leaves
/// the patch support are zeroed and masked false.
pub fn warp_image(img: &Array3<f64>, transform: &Transform) -> (Array3<f64>, Array2<bool>) {
    let (p, pw, channels) = img.dim();
    debug_assert_eq!(p, pw, "patches are square");
    let mut out = Array3::zeros((p, p, channels));
    let mut mask = Array2::from_elem((p, p), false);
    let view = img.view();
    let mut px = vec![0.0; channels];
    let hi = p as f64 - 1.0;
    for y in 0..p {
        for x in 0..p {
            let (sy, sx) = transform.source_of(y as f64, x as f64, p);
            if (0.0..=hi).contains(&sy) && (0.0..=hi).contains(&sx) {
                sample_bilinear(&view, sy, sx, &mut px);
                for (ch, v) in px.iter().enumerate() {
                    out[[y, x, ch]] = *v;
                }
                mask[[y, x]] = true;
            }
        }
    }
    (out, mask)
}

/// LR-camera pixel coordinates (x, y) for each LR ray of the patch under
/// `transform`, derived by mapping patch-local LR centers to HR coordinates,
/// transforming there, and mapping back through the half-pixel convention.
fn lr_ray_coords(spec: &PatchSpec, transform: &Transform) -> Array3<f64> {
    let lr = spec.lr_size();
    let r = spec.ratio as f64;
    let (r0, c0) = (spec.origin.0 as f64, spec.origin.1 as f64);
    let mut coords = Array3::zeros((lr, lr, 2));
    for u in 0..lr {
        for v in 0..lr {
            let hy = (u as f64 + 0.5) * r - 0.5;
            let hx = (v as f64 + 0.5) * r - 0.5;
            let (sy, sx) = transform.source_of(hy, hx, spec.size);
            coords[[u, v, 0]] = (c0 + sx + 0.5) / r - 0.5;
            coords[[u, v, 1]] = (r0 + sy + 0.5) / r - 0.5;
        }
    }
    coords
}

/// Builds the LR/HR pair for `spec` from an HR image and its camera. When the
/// spec carries a transform, both members are produced in transformed form.
pub fn make_patch_pair(
    hr_image: &Array3<f64>,
    camera: &CameraModel,
    spec: &PatchSpec,
) -> Result<PatchPair> {
    let (h, w, channels) = hr_image.dim();
    if channels != 3 {
        return Err(Error::Shape(format!("expected an [H, W, 3] image, got {channels} channels")));
    }
    if camera.height != h || camera.width != w {
        return Err(Error::InvalidCamera(format!(
            "camera is {}x{} but the image is {h}x{w}",
            camera.height, camera.width
        )));
    }
    spec.validate(h, w)?;
    let (r0, c0) = spec.origin;
    let p = spec.size;
    let crop = hr_image.slice(ndarray::s![r0..r0 + p, c0..c0 + p, ..]).to_owned();
    if crop.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "HR target values must lie in [0, 1]".into(),
        ));
    }
    let transform = spec.transform.unwrap_or_else(Transform::identity);
    let (hr_target, mask) = if transform.is_identity() {
        let mask = Array2::from_elem((p, p), true);
        (crop, mask)
    } else {
        if transform.rotation_degrees.abs() >= MAX_ROTATION_DEG {
            return Err(Error::InvalidArgument(format!(
                "rotation {} deg reaches the {MAX_ROTATION_DEG} deg mask-dominance guard",
                transform.rotation_degrees
            )));
        }
        warp_image(&crop, &transform)
    };
    let lr = spec.lr_size();
    let lr_target = bilinear_resize(&hr_target, lr, lr)?;
    let lr_camera = downscale_camera(camera, spec.ratio as usize)?;
    let coords = lr_ray_coords(spec, &transform);
    let lr_rays = generate_rays_at(&lr_camera, coords.view())?;
    Ok(PatchPair { lr_rays, hr_target, mask, lr_target, spec: spec.clone() })
}

/// Applies `transform` on top of whatever `pair` already carries: the HR
/// target and mask are rewarped, the LR rays are regenerated under the
/// composed transform, and the spec records the composition. An identity
/// composition restores the untransformed pair exactly (flip twice, for
/// example). The HR content is resampled from the pair's current target, so
/// repeated non-flip transforms accumulate resampling blur.
pub fn apply_transform(
    pair: &PatchPair,
    camera: &CameraModel,
    transform: Transform,
) -> Result<PatchPair> {
    if transform.is_identity() {
        return Ok(pair.clone());
    }
    let composed = pair.spec.transform.unwrap_or_else(Transform::identity).then(transform);
    if composed.rotation_degrees.abs() >= MAX_ROTATION_DEG {
        return Err(Error::InvalidArgument(format!(
            "composed rotation {} deg reaches the {MAX_ROTATION_DEG} deg mask-dominance guard",
            composed.rotation_degrees
        )));
    }
    let p = pair.spec.size;
    let (hr_target, warp_mask) = warp_image(&pair.hr_target, &transform);
    // A warped pixel is trustworthy only if its sources were: combine the
    // warp's support mask with the warp of the existing mask.
    let old_mask = pair.mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let old_mask = old_mask.insert_axis(ndarray::Axis(2));
    let (mask_warp, _) = warp_image(&old_mask, &transform);
    let mut mask = warp_mask;
    for y in 0..p {
        for x in 0..p {
            if mask_warp[[y, x, 0]] < 0.999 {
                mask[[y, x]] = false;
            }
        }
    }
    let lr = pair.spec.lr_size();
    let lr_target = bilinear_resize(&hr_target, lr, lr)?;
    let lr_camera = downscale_camera(camera, pair.spec.ratio as usize)?;
    let coords = lr_ray_coords(&pair.spec, &composed);
    let lr_rays = generate_rays_at(&lr_camera, coords.view())?;
    let spec = PatchSpec {
        transform: if composed.is_identity() { None } else { Some(composed) },
        ..pair.spec.clone()
    };
    Ok(PatchPair { lr_rays, hr_target, mask, lr_target, spec })
}

/// Augmentation parameters: rotation drawn uniformly from
/// [-max_rotation_deg, max_rotation_deg], horizontal flip with probability
/// hflip_prob. Defaults mirror the reported setup (10 degrees, 10%).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { max_rotation_deg: 10.0, hflip_prob: 0.1 }
    }
}

/// Draws a transform from `params` and applies it to the pair. An identity
/// draw (0 degrees, no flip) returns the pair unchanged, bitwise.
pub fn augment_pair(
    pair: &PatchPair,
    camera: &CameraModel,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<PatchPair> {
    if !(0.0..MAX_ROTATION_DEG).contains(&params.max_rotation_deg) {
        return Err(Error::InvalidArgument(format!(
            "max_rotation_deg {} outside [0, {MAX_ROTATION_DEG})",
            params.max_rotation_deg
        )));
    }
    if !(0.0..=1.0).contains(&params.hflip_prob) {
        return Err(Error::InvalidArgument(format!(
            "hflip_prob {} outside [0, 1]",
            params.hflip_prob
        )));
    }
    let rotation_degrees = if params.max_rotation_deg > 0.0 {
        rng.gen_range(-params.max_rotation_deg..=params.max_rotation_deg)
    } else {
        0.0
    };
    let hflip = rng.gen_bool(params.hflip_prob);
    apply_transform(pair, camera, Transform { rotation_degrees, hflip })
}
