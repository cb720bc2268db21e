//! Loader for synthetic scenes in the transforms-JSON layout: per-split
//! `transforms_{train,val,test}.json` files with a shared horizontal field of
//! view and per-frame camera-to-world matrices, plus RGBA PNGs.

use super::{DatasetKind, SceneDataset, View};
use crate::geometry::{Aabb, CameraModel};
use crate::io::png;
use crate::{Error, Result};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_NEAR: f64 = 2.0;
pub const DEFAULT_FAR: f64 = 6.0;
pub const DEFAULT_HALF_EXTENT: f64 = 1.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TransformsFile {
    pub camera_angle_x: f64,
    /// Optional extensions written by the toy-scene generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb_half_extent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy_spec: Option<super::ToySceneSpec>,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Frame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

pub(crate) fn read_transforms(root: &Path, split: &str) -> Result<TransformsFile> {
    let path = root.join(format!("transforms_{split}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn resolve_image_path(root: &Path, file_path: &str) -> std::path::PathBuf {
    let rel = file_path.strip_prefix("./").unwrap_or(file_path);
    let mut path = root.join(rel);
    if path.extension().is_none() {
        path.set_extension("png");
    }
    path
}

pub(crate) fn pose_from_rows(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_row_slice(&rows.concat())
}

fn load_split(
    root: &Path,
    split: &str,
    background: [f64; 3],
    near: f64,
    far: f64,
) -> Result<Vec<View>> {
    let transforms = read_transforms(root, split)?;
    let mut views = Vec::with_capacity(transforms.frames.len());
    for frame in &transforms.frames {
        let path = resolve_image_path(root, &frame.file_path);
        let image = png::load_rgb(&path, background)?;
        let (h, w, _) = image.dim();
        let focal = 0.5 * w as f64 / (0.5 * transforms.camera_angle_x).tan();
        let camera = CameraModel::centered(
            w,
            h,
            focal,
            pose_from_rows(&frame.transform_matrix),
            near,
            far,
        );
        views.push(View { name: frame.file_path.clone(), image, camera });
    }
    Ok(views)
}

/// Loads a synthetic scene. Transparent pixels are composited onto
/// `background`; near/far planes and the scene half-extent come from optional
/// fields of `transforms_train.json`, defaulting to the synthetic-dataset
/// standards (2.0, 6.0, 1.5).
pub fn load_blender(root: &Path, background: [f64; 3]) -> Result<SceneDataset> {
    let train_meta = read_transforms(root, "train")?;
    let near = train_meta.near.unwrap_or(DEFAULT_NEAR);
    let far = train_meta.far.unwrap_or(DEFAULT_FAR);
    let half = train_meta.aabb_half_extent.unwrap_or(DEFAULT_HALF_EXTENT);
    if !(near > 0.0 && near < far) {
        return Err(Error::Dataset(format!(
            "{}: invalid near/far planes {near}/{far}",
            root.display()
        )));
    }
    let kind = if train_meta.toy_spec.is_some() { DatasetKind::Toy } else { DatasetKind::Blender };
    let dataset = SceneDataset {
        kind,
        train: load_split(root, "train", background, near, far)?,
        val: load_split(root, "val", background, near, far)?,
        test: load_split(root, "test", background, near, far)?,
        background,
        bounding_box: Aabb::cube(half),
        ndc: false,
    };
    dataset.validate()?;
    Ok(dataset)
}
