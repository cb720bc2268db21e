//! Dataset ingestion: synthetic (Blender-style transforms), forward-facing
//! (LLFF-style pose bounds), and a procedural toy scene whose brute-force ray
//! tracer doubles as a ground-truth oracle for renderer and training tests.

mod blender;
mod llff;
mod toy;

pub use blender::{load_blender, DEFAULT_FAR, DEFAULT_HALF_EXTENT, DEFAULT_NEAR};
pub use llff::load_llff;
pub use toy::{
    generate_toy_scene, load_toy_spec, persist_toy_scene, Checker, Primitive, ToySceneSpec,
    ToyTracer,
};

use crate::geometry::{downscale_camera, Aabb, CameraModel};
use crate::sr::resize::bilinear_resize;
use crate::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blender,
    Llff,
    Toy,
}

/// One posed image.
#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    /// [H, W, 3] in [0, 1].
    pub image: Array3<f64>,
    pub camera: CameraModel,
}

/// A loaded scene: train/val/test splits of posed images plus the rendering
/// conventions they were captured under.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub kind: DatasetKind,
    pub train: Vec<View>,
    pub val: Vec<View>,
    pub test: Vec<View>,
    /// Color composited behind transparent pixels and rendered behind empty
    /// space.
    pub background: [f64; 3],
    /// Scene bounds for the field grid (in NDC space when `ndc` is set).
    pub bounding_box: Aabb,
    /// Forward-facing scenes train in normalized device coordinates.
    pub ndc: bool,
}

impl SceneDataset {
    pub fn splits(&self) -> [(&'static str, &Vec<View>); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    /// Checks the structural invariants: consistent resolution within each
    /// split, valid poses, and camera/image agreement.
    pub fn validate(&self) -> Result<()> {
        for (split, views) in self.splits() {
            let mut dims: Option<(usize, usize)> = None;
            for view in views {
                let (h, w, c) = view.image.dim();
                if c != 3 {
                    return Err(Error::Dataset(format!(
                        "{split}/{}: expected 3 channels, got {c}",
                        view.name
                    )));
                }
                if view.camera.height != h || view.camera.width != w {
                    return Err(Error::Dataset(format!(
                        "{split}/{}: camera says {}x{}, image is {h}x{w}",
                        view.name, view.camera.height, view.camera.width
                    )));
                }
                match dims {
                    None => dims = Some((h, w)),
                    Some(d) if d != (h, w) => {
                        return Err(Error::Dataset(format!(
                            "{split}/{}: resolution {h}x{w} differs from the split's {}x{}",
                            view.name, d.0, d.1
                        )));
                    }
                    _ => {}
                }
                view.camera.validate()?;
            }
        }
        Ok(())
    }

    /// Content hash over poses, intrinsics, and image pixels; identical
    /// directories load to identical fingerprints.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let push_f64 = |h: &mut Sha256, v: f64| h.update(v.to_le_bytes());
        hasher.update([match self.kind {
            DatasetKind::Blender => 0u8,
            DatasetKind::Llff => 1,
            DatasetKind::Toy => 2,
        }]);
        hasher.update([self.ndc as u8]);
        for c in self.background {
            push_f64(&mut hasher, c);
        }
        for axis in 0..3 {
            push_f64(&mut hasher, self.bounding_box.min[axis]);
            push_f64(&mut hasher, self.bounding_box.max[axis]);
        }
        for (split, views) in self.splits() {
            hasher.update(split.as_bytes());
            hasher.update((views.len() as u64).to_le_bytes());
            for view in views {
                hasher.update(view.name.as_bytes());
                let cam = &view.camera;
                hasher.update((cam.width as u64).to_le_bytes());
                hasher.update((cam.height as u64).to_le_bytes());
                for v in [cam.focal_x, cam.focal_y, cam.principal_x, cam.principal_y, cam.near, cam.far] {
                    push_f64(&mut hasher, v);
                }
                for v in cam.pose.iter() {
                    push_f64(&mut hasher, *v);
                }
                for v in view.image.iter() {
                    push_f64(&mut hasher, *v);
                }
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Loads a scene by sniffing the directory layout: `transforms_train.json`
/// selects the transforms format (including generated toy scenes), a
/// `poses_bounds.npy` selects the forward-facing capture format. For the
/// transforms format a `downsample` factor > 1 is applied after loading.
pub fn load_dataset(root: &Path, downsample: usize, background: [f64; 3]) -> Result<SceneDataset> {
    if root.join("transforms_train.json").exists() {
        let dataset = load_blender(root, background)?;
        if downsample > 1 {
            return downsample_dataset(&dataset, downsample as u32);
        }
        return Ok(dataset);
    }
    if root.join("poses_bounds.npy").exists() {
        return load_llff(root, downsample.max(1), background);
    }
    Err(Error::Dataset(format!(
        "{}: found neither transforms_train.json nor poses_bounds.npy",
        root.display()
    )))
}

/// Scales every split down by an integer ratio: images via area-consistent
/// bilinear resampling, cameras via [`downscale_camera`].
pub fn downsample_dataset(dataset: &SceneDataset, ratio: u32) -> Result<SceneDataset> {
    if ratio == 0 {
        return Err(Error::InvalidArgument("downsample ratio must be positive".into()));
    }
    if ratio == 1 {
        return Ok(dataset.clone());
    }
    let shrink = |views: &Vec<View>| -> Result<Vec<View>> {
        views
            .iter()
            .map(|view| {
                let (h, w, _) = view.image.dim();
                let r = ratio as usize;
                if h % r != 0 || w % r != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "{}: resolution {h}x{w} not divisible by {ratio}",
                        view.name
                    )));
                }
                Ok(View {
                    name: view.name.clone(),
                    image: bilinear_resize(&view.image, h / r, w / r)?,
                    camera: downscale_camera(&view.camera, r)?,
                })
            })
            .collect()
    };
    Ok(SceneDataset {
        kind: dataset.kind,
        train: shrink(&dataset.train)?,
        val: shrink(&dataset.val)?,
        test: shrink(&dataset.test)?,
        background: dataset.background,
        bounding_box: dataset.bounding_box,
        ndc: dataset.ndc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn downsample_identity_and_constants() {
        let spec = ToySceneSpec { image_size: 16, n_train: 1, n_val: 0, n_test: 1, ..Default::default() };
        let (dataset, _) = generate_toy_scene(&spec).unwrap();
        let same = downsample_dataset(&dataset, 1).unwrap();
        assert_eq!(same.fingerprint(), dataset.fingerprint());

        let mut constant = dataset.clone();
        for view in constant.train.iter_mut().chain(constant.test.iter_mut()) {
            view.image.fill(0.625);
        }
        let down = downsample_dataset(&constant, 2).unwrap();
        assert_eq!(down.train[0].image.dim(), (8, 8, 3));
        assert_eq!(down.train[0].camera.width, 8);
        for v in down.train[0].image.iter() {
            assert_abs_diff_eq!(*v, 0.625, epsilon = 1e-12);
        }
    }

    #[test]
    fn downsample_then_upsample_recovers_smooth_ramp() {
        let spec = ToySceneSpec { image_size: 64, n_train: 1, n_val: 0, n_test: 0, ..Default::default() };
        let (mut dataset, _) = generate_toy_scene(&spec).unwrap();
        let (h, w, _) = dataset.train[0].image.dim();
        dataset.train[0].image =
            Array3::from_shape_fn((h, w, 3), |(y, x, _)| {
                0.5 * (x as f64 / (w - 1) as f64) + 0.5 * (y as f64 / (h - 1) as f64)
            });
        let down = downsample_dataset(&dataset, 2).unwrap();
        let up = crate::sr::bilinear_upscale(&down.train[0].image, 2).unwrap();
        let mut max_abs: f64 = 0.0;
        for (a, b) in up.iter().zip(dataset.train[0].image.iter()) {
            max_abs = max_abs.max((a - b).abs());
        }
        assert!(max_abs < 0.02, "round-trip error {max_abs}");
    }

    #[test]
    fn downsample_requires_divisibility() {
        let spec = ToySceneSpec { image_size: 18, n_train: 1, n_val: 0, n_test: 0, ..Default::default() };
        let (dataset, _) = generate_toy_scene(&spec).unwrap();
        assert!(downsample_dataset(&dataset, 4).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let spec = ToySceneSpec { image_size: 16, n_train: 2, n_val: 0, n_test: 1, ..Default::default() };
        let (a, _) = generate_toy_scene(&spec).unwrap();
        let (b, _) = generate_toy_scene(&spec).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.train[1].image[[3, 5, 0]] += 1e-6;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
