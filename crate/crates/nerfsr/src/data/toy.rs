//! Procedural toy scenes: a small analytic tracer over spheres and boxes that
//! doubles as a ground-truth oracle, plus persistence in the same on-disk
//! layout as synthetic captures so the regular loader can read the result.

use super::{blender, DatasetKind, SceneDataset, View};
use crate::geometry::{generate_rays, look_at_pose, Aabb, CameraModel};
use crate::io::png;
use crate::rng;
use crate::{Error, Result};
use nalgebra::{Matrix4, Vector3};
use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Two-tone checker texture in world space: cells of side `scale`, alternating
/// between the primitive's albedo and `color2` by coordinate parity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checker {
    pub color2: [f64; 3],
    pub scale: f64,
}

/// Analytic solid. All coordinates are world-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checker: Option<Checker>,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
        albedo: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checker: Option<Checker>,
    },
}

/// Full description of a procedural scene: geometry, lighting, and the camera
/// ring used to generate the train/val/test splits. Serializable so a
/// persisted scene can be regenerated bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySceneSpec {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub camera_angle_x: f64,
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub bounding_half_extent: f64,
    pub primitives: Vec<Primitive>,
    /// Rays per pixel axis: each pixel averages `aa_samples²` rays on an
    /// ordered subgrid. 1 traces the pixel center only, giving hard-stepped
    /// silhouettes; higher values area-average the pixel footprint the way a
    /// rendered or captured dataset would.
    pub aa_samples: usize,
    pub seed: u64,
}

impl Default for ToySceneSpec {
    fn default() -> Self {
        Self {
            image_size: 200,
            n_train: 20,
            n_val: 0,
            n_test: 5,
            ring_radius: 3.5,
            ring_height: 1.0,
            camera_angle_x: 0.8,
            light_dir: [-0.45, -0.8, -0.4],
            ambient: 0.3,
            background: [1.0, 1.0, 1.0],
            near: 2.0,
            far: 6.0,
            bounding_half_extent: 1.5,
            primitives: vec![
                Primitive::Sphere {
                    center: [0.0, 0.15, 0.0],
                    radius: 0.75,
                    albedo: [0.85, 0.3, 0.25],
                    checker: Some(Checker { color2: [0.95, 0.85, 0.3], scale: 0.35 }),
                },
                Primitive::Sphere {
                    center: [-0.8, -0.45, 0.55],
                    radius: 0.35,
                    albedo: [0.25, 0.45, 0.9],
                    checker: None,
                },
                Primitive::Box {
                    min: [0.35, -0.85, -0.95],
                    max: [1.05, -0.15, -0.25],
                    albedo: [0.3, 0.8, 0.4],
                    checker: None,
                },
            ],
            aa_samples: 1,
            seed: 0,
        }
    }
}

const HIT_EPS: f64 = 1e-9;

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Nearest positive intersection of a normalized ray with a sphere, with the
/// outward (or inward, if the origin is inside) surface normal.
fn intersect_sphere(o: [f64; 3], d: [f64; 3], center: [f64; 3], radius: f64) -> Option<(f64, [f64; 3])> {
    let oc = sub(o, center);
    let b = dot(oc, d);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t = if -b - s > HIT_EPS {
        -b - s
    } else if -b + s > HIT_EPS {
        -b + s
    } else {
        return None;
    };
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    Some((t, normalize(sub(p, center))))
}

/// Slab-test intersection with an axis-aligned box; the normal points against
/// the ray along the axis whose slab was crossed at the hit.
fn intersect_box(o: [f64; 3], d: [f64; 3], bmin: [f64; 3], bmax: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis_enter = 0usize;
    let mut axis_exit = 0usize;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < bmin[a] || o[a] > bmax[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let mut ta = (bmin[a] - o[a]) * inv;
        let mut tb = (bmax[a] - o[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t_enter {
            t_enter = ta;
            axis_enter = a;
        }
        if tb < t_exit {
            t_exit = tb;
            axis_exit = a;
        }
    }
    if t_enter > t_exit {
        return None;
    }
    let (t, axis, outward) = if t_enter > HIT_EPS {
        (t_enter, axis_enter, true)
    } else if t_exit > HIT_EPS {
        (t_exit, axis_exit, false)
    } else {
        return None;
    };
    let mut normal = [0.0; 3];
    // Entering face opposes the ray; exiting face (origin inside) agrees.
    normal[axis] = if outward { -d[axis].signum() } else { d[axis].signum() };
    Some((t, normal))
}

fn albedo_at(base: [f64; 3], checker: &Option<Checker>, p: [f64; 3]) -> [f64; 3] {
    match checker {
        None => base,
        Some(c) => {
            let parity: i64 = p.iter().map(|v| (v / c.scale).floor() as i64).sum();
            if parity.rem_euclid(2) == 0 {
                base
            } else {
                c.color2
            }
        }
    }
}

/// Lambert-shaded analytic renderer for a [`ToySceneSpec`]. Serves as the
/// pixel-level ground truth that learned reconstructions are scored against.
#[derive(Debug, Clone)]
pub struct ToyTracer {
    spec: ToySceneSpec,
    light: [f64; 3],
}

impl ToyTracer {
    pub fn new(spec: ToySceneSpec) -> Result<Self> {
        if spec.image_size == 0 {
            return Err(Error::InvalidArgument("toy image_size must be positive".into()));
        }
        if !(spec.camera_angle_x > 0.0 && spec.camera_angle_x < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!(
                "camera_angle_x {} must lie in (0, pi)",
                spec.camera_angle_x
            )));
        }
        if !(0.0..=1.0).contains(&spec.ambient) {
            return Err(Error::InvalidArgument(format!("ambient {} outside [0, 1]", spec.ambient)));
        }
        if !(spec.near > 0.0 && spec.near < spec.far) {
            return Err(Error::InvalidArgument(format!(
                "toy bounds ({}, {}) must satisfy 0 < near < far",
                spec.near, spec.far
            )));
        }
        if spec.bounding_half_extent <= 0.0 {
            return Err(Error::InvalidArgument("bounding_half_extent must be positive".into()));
        }
        if spec.aa_samples == 0 {
            return Err(Error::InvalidArgument("aa_samples must be at least 1".into()));
        }
        if dot(spec.light_dir, spec.light_dir) == 0.0 {
            return Err(Error::InvalidArgument("light_dir must be nonzero".into()));
        }
        for (i, prim) in spec.primitives.iter().enumerate() {
            match prim {
                Primitive::Sphere { radius, .. } => {
                    if *radius <= 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "primitive {i}: sphere radius {radius} must be positive"
                        )));
                    }
                }
                Primitive::Box { min, max, .. } => {
                    if min.iter().zip(max).any(|(lo, hi)| lo >= hi) {
                        return Err(Error::InvalidArgument(format!(
                            "primitive {i}: box min {min:?} must be strictly below max {max:?}"
                        )));
                    }
                }
            }
            let checker = match prim {
                Primitive::Sphere { checker, .. } | Primitive::Box { checker, .. } => checker,
            };
            if let Some(c) = checker {
                if c.scale <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "primitive {i}: checker scale {} must be positive",
                        c.scale
                    )));
                }
            }
        }
        let light = normalize(spec.light_dir);
        Ok(Self { spec, light })
    }

    pub fn spec(&self) -> &ToySceneSpec {
        &self.spec
    }

    /// Shades one normalized world-space ray: nearest-hit Lambert with a
    /// constant ambient floor, or the background color on a miss.
    pub fn shade(&self, origin: [f64; 3], direction: [f64; 3]) -> [f64; 3] {
        let mut best: Option<(f64, [f64; 3], [f64; 3])> = None;
        for prim in &self.spec.primitives {
            let hit = match prim {
                Primitive::Sphere { center, radius, .. } => {
                    intersect_sphere(origin, direction, *center, *radius)
                }
                Primitive::Box { min, max, .. } => intersect_box(origin, direction, *min, *max),
            };
            if let Some((t, normal)) = hit {
                if best.as_ref().map(|(bt, _, _)| t < *bt).unwrap_or(true) {
                    let p = [
                        origin[0] + t * direction[0],
                        origin[1] + t * direction[1],
                        origin[2] + t * direction[2],
                    ];
                    let (base, checker) = match prim {
                        Primitive::Sphere { albedo, checker, .. }
                        | Primitive::Box { albedo, checker, .. } => (*albedo, checker),
                    };
                    best = Some((t, normal, albedo_at(base, checker, p)));
                }
            }
        }
        match best {
            None => self.spec.background,
            Some((_, normal, albedo)) => {
                let diffuse = (-dot(normal, self.light)).max(0.0);
                let brightness = self.spec.ambient + (1.0 - self.spec.ambient) * diffuse;
                let mut out = [0.0; 3];
                for c in 0..3 {
                    out[c] = (albedo[c] * brightness).clamp(0.0, 1.0);
                }
                out
            }
        }
    }

    /// Traces a full image for the given camera. With `aa_samples` = n > 1
    /// the image is traced through a camera scaled n× in every intrinsic —
    /// which places rays on the ordered n×n subgrid of each pixel — and
    /// box-averaged back down.
    pub fn render(&self, camera: &CameraModel) -> Result<Array3<f64>> {
        let n = self.spec.aa_samples;
        let scaled = CameraModel {
            width: camera.width * n,
            height: camera.height * n,
            focal_x: camera.focal_x * n as f64,
            focal_y: camera.focal_y * n as f64,
            principal_x: camera.principal_x * n as f64,
            principal_y: camera.principal_y * n as f64,
            ..*camera
        };
        let rays = generate_rays(&scaled, None)?;
        let (h, w) = (camera.height, camera.width);
        let mut image = Array3::zeros((h, w, 3));
        let weight = 1.0 / (n * n) as f64;
        for y in 0..h * n {
            for x in 0..w * n {
                let o = [rays.origins[[y, x, 0]], rays.origins[[y, x, 1]], rays.origins[[y, x, 2]]];
                let d = [
                    rays.directions[[y, x, 0]],
                    rays.directions[[y, x, 1]],
                    rays.directions[[y, x, 2]],
                ];
                let rgb = self.shade(o, d);
                for c in 0..3 {
                    image[[y / n, x / n, c]] += weight * rgb[c];
                }
            }
        }
        Ok(image)
    }
}

/// Evenly spaced cameras on a ring around the origin, with a split-specific
/// phase offset and seeded jitter in angle and height so no two splits share
/// a viewpoint.
fn ring_cameras(spec: &ToySceneSpec, count: usize, split_index: u64) -> Vec<Matrix4<f64>> {
    let mut rng = rng::stream(spec.seed, &[rng::phase::TOY_POSES, split_index]);
    let tau = std::f64::consts::TAU;
    let step = tau / count.max(1) as f64;
    let phase = split_index as f64 * 0.37;
    (0..count)
        .map(|k| {
            let angle = (k as f64 + phase) * step + (rng.gen::<f64>() - 0.5) * 0.5 * step;
            let height = spec.ring_height + (rng.gen::<f64>() - 0.5) * 0.3;
            let eye = Vector3::new(
                spec.ring_radius * angle.cos(),
                height,
                spec.ring_radius * angle.sin(),
            );
            look_at_pose(eye, Vector3::zeros(), Vector3::y())
        })
        .collect()
}

fn camera_for(spec: &ToySceneSpec, pose: Matrix4<f64>) -> CameraModel {
    let size = spec.image_size;
    let focal = 0.5 * size as f64 / (0.5 * spec.camera_angle_x).tan();
    CameraModel::centered(size, size, focal, pose, spec.near, spec.far)
}

/// Renders a complete dataset from a spec. The returned images are the exact
/// f64 tracer output (no quantization); the tracer is returned alongside so
/// callers can score against fresh renders at arbitrary cameras.
pub fn generate_toy_scene(spec: &ToySceneSpec) -> Result<(SceneDataset, ToyTracer)> {
    let tracer = ToyTracer::new(spec.clone())?;
    let mut splits: Vec<Vec<View>> = Vec::new();
    let counts = [spec.n_train, spec.n_val, spec.n_test];
    for (si, (split, count)) in ["train", "val", "test"].iter().zip(counts).enumerate() {
        let mut views = Vec::with_capacity(count);
        for (k, pose) in ring_cameras(spec, count, si as u64).into_iter().enumerate() {
            let camera = camera_for(spec, pose);
            let image = tracer.render(&camera)?;
            views.push(View { name: format!("./{split}/r_{k}"), image, camera });
        }
        splits.push(views);
    }
    let mut it = splits.into_iter();
    let dataset = SceneDataset {
        kind: DatasetKind::Toy,
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
        background: spec.background,
        bounding_box: Aabb::cube(spec.bounding_half_extent),
        ndc: false,
    };
    dataset.validate()?;
    Ok((dataset, tracer))
}

/// Renders a toy scene and writes it to disk in the synthetic-capture layout
/// (`transforms_{split}.json` plus one PNG per view), embedding the spec in
/// the train manifest so the scene can be regenerated exactly. Returns the
/// in-memory dataset (unquantized images).
pub fn persist_toy_scene(spec: &ToySceneSpec, root: &Path) -> Result<SceneDataset> {
    let (dataset, _) = generate_toy_scene(spec)?;
    for (split, views) in dataset.splits() {
        let dir = root.join(split);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.clone(), e))?;
        let mut frames = Vec::with_capacity(views.len());
        for (k, view) in views.iter().enumerate() {
            png::save_rgb(&dir.join(format!("r_{k}.png")), &view.image)?;
            let pose = view.camera.pose;
            let mut rows = [[0.0; 4]; 4];
            for r in 0..4 {
                for c in 0..4 {
                    rows[r][c] = pose[(r, c)];
                }
            }
            frames.push(blender::Frame {
                file_path: format!("./{split}/r_{k}"),
                transform_matrix: rows,
            });
        }
        let manifest = blender::TransformsFile {
            camera_angle_x: spec.camera_angle_x,
            near: Some(spec.near),
            far: Some(spec.far),
            aabb_half_extent: Some(spec.bounding_half_extent),
            toy_spec: (split == "train").then(|| spec.clone()),
            frames,
        };
        let path = root.join(format!("transforms_{split}.json"));
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.clone(), e))?;
    }
    Ok(dataset)
}

/// Reads back the spec embedded by [`persist_toy_scene`].
pub fn load_toy_spec(root: &Path) -> Result<ToySceneSpec> {
    let manifest = blender::read_transforms(root, "train")?;
    manifest.toy_spec.ok_or_else(|| {
        Error::Dataset(format!(
            "{}: transforms_train.json carries no embedded toy scene spec",
            root.display()
        ))
    })
}
