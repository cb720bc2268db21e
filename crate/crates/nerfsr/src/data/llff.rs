//! Loader for forward-facing captures in the pose-bounds layout: an N x 17
//! array file (flattened 3x5 pose-and-intrinsics matrix plus per-image depth
//! bounds) alongside a directory of images.

use super::{DatasetKind, SceneDataset, View};
use crate::geometry::{Aabb, CameraModel};
use crate::io::{npy, png};
use crate::sr::resize::bilinear_resize;
use crate::{Error, Result};
use nalgebra::Matrix4;
use std::path::{Path, PathBuf};

fn whole(v: f64, what: &str) -> Result<usize> {
    if v <= 0.0 || v.fract() != 0.0 {
        return Err(Error::Dataset(format!("{what} {v} is not a positive integer")));
    }
    Ok(v as usize)
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a forward-facing scene at `1/downsample` of the stored resolution.
///
/// The stored pose axes follow the (down, right, backwards) convention and
/// are permuted to right/up/backwards at load time. Images are read from
/// `images_{downsample}/` when present, otherwise from `images/` and resized.
/// Every 8th view (index 0, 8, ...) goes to the test split, the remaining 7/8
/// to train.
pub fn load_llff(root: &Path, downsample: usize, background: [f64; 3]) -> Result<SceneDataset> {
    if downsample == 0 {
        return Err(Error::InvalidArgument("downsample factor must be positive".into()));
    }
    let pb_path = root.join("poses_bounds.npy");
    let rows = npy::read_f64_2d(&pb_path)?;
    if rows.ncols() != 17 {
        return Err(Error::Dataset(format!(
            "{}: rows must have 17 values (3x5 pose + 2 bounds), got {}",
            pb_path.display(),
            rows.ncols()
        )));
    }
    let scaled_dir = root.join(format!("images_{downsample}"));
    let (dir, prescaled) = if downsample > 1 && scaled_dir.is_dir() {
        (scaled_dir, true)
    } else {
        (root.join("images"), downsample == 1)
    };
    let files = sorted_images(&dir)?;
    if files.len() != rows.nrows() {
        return Err(Error::Dataset(format!(
            "{}: {} pose rows but {} images in {}",
            pb_path.display(),
            rows.nrows(),
            files.len(),
            dir.display()
        )));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, file) in files.iter().enumerate() {
        let row = rows.row(i);
        let m = |r: usize, c: usize| row[r * 5 + c];
        let stored_h = whole(m(0, 4), "stored height")?;
        let stored_w = whole(m(1, 4), "stored width")?;
        let focal = m(2, 4);
        if stored_h % downsample != 0 || stored_w % downsample != 0 {
            return Err(Error::Dataset(format!(
                "{}: stored resolution {stored_w}x{stored_h} not divisible by {downsample}",
                file.display()
            )));
        }
        let (h, w) = (stored_h / downsample, stored_w / downsample);
        let (near, far) = (row[15], row[16]);
        if !(near > 0.0 && near < far) {
            return Err(Error::Dataset(format!(
                "{}: row {i} bounds ({near}, {far}) must satisfy 0 < near < far",
                pb_path.display()
            )));
        }
        // Stored columns are (down, right, backwards): swing them to our
        // (right, up, backwards) by taking (c1, -c0, c2).
        let mut pose = Matrix4::identity();
        for r in 0..3 {
            pose[(r, 0)] = m(r, 1);
            pose[(r, 1)] = -m(r, 0);
            pose[(r, 2)] = m(r, 2);
            pose[(r, 3)] = m(r, 3);
        }
        let mut image = png::load_rgb(file, background)?;
        if !prescaled {
            let (ih, iw, _) = image.dim();
            if (ih, iw) != (stored_h, stored_w) {
                return Err(Error::Dataset(format!(
                    "{}: image is {iw}x{ih} but poses say {stored_w}x{stored_h}",
                    file.display()
                )));
            }
            image = bilinear_resize(&image, h, w)?;
        }
        let (ih, iw, _) = image.dim();
        if (ih, iw) != (h, w) {
            return Err(Error::Dataset(format!(
                "{}: image is {iw}x{ih}, expected {w}x{h} at 1/{downsample} scale",
                file.display()
            )));
        }
        let camera = CameraModel::centered(w, h, focal / downsample as f64, pose, near, far);
        let name = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("view_{i}"));
        let view = View { name, image, camera };
        if i % 8 == 0 {
            test.push(view);
        } else {
            train.push(view);
        }
    }

    let dataset = SceneDataset {
        kind: DatasetKind::Llff,
        train,
        val: Vec::new(),
        test,
        background,
        // Rays are warped to normalized device coordinates downstream, where
        // all visible points land inside the unit cube.
        bounding_box: Aabb::cube(1.0),
        ndc: true,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    /// Stored (down, right, backwards) axes of an identity-rotation camera,
    /// i.e. columns (-y, +x, +z), with translation `t` and the given
    /// intrinsics column.
    fn row(t: [f64; 3], h: f64, w: f64, f: f64, near: f64, far: f64) -> [f64; 17] {
        let mut r = [0.0; 17];
        // Row-major 3x5: columns are c0=(0,-1,0), c1=(1,0,0), c2=(0,0,1).
        let m = [
            [0.0, 1.0, 0.0, t[0], h],
            [-1.0, 0.0, 0.0, t[1], w],
            [0.0, 0.0, 1.0, t[2], f],
        ];
        for rr in 0..3 {
            for cc in 0..5 {
                r[rr * 5 + cc] = m[rr][cc];
            }
        }
        r[15] = near;
        r[16] = far;
        r
    }

    fn write_fixture(root: &Path, n: usize, stored: (f64, f64, f64), img: (u32, u32)) {
        let mut rows = Array2::zeros((n, 17));
        for i in 0..n {
            let r = row([i as f64 * 0.1, 0.0, 4.0], stored.0, stored.1, stored.2, 1.0, 8.0);
            for (c, v) in r.iter().enumerate() {
                rows[[i, c]] = *v;
            }
        }
        npy::write_f64_2d(&root.join("poses_bounds.npy"), &rows).unwrap();
        std::fs::create_dir(root.join("images_4")).unwrap();
        for i in 0..n {
            let px = image::Rgb([((i * 13) % 255) as u8, 128, 40]);
            image::RgbImage::from_pixel(img.0, img.1, px)
                .save(root.join(format!("images_4/image{i:03}.png")))
                .unwrap();
        }
    }

    #[test]
    fn sixteen_rows_split_axis_fix_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 16, (48.0, 64.0, 80.0), (16, 12));
        let ds = load_llff(dir.path(), 4, [0.0; 3]).unwrap();
        assert_eq!(ds.train.len(), 14);
        assert_eq!(ds.test.len(), 2);
        assert!(ds.ndc);
        let cam = &ds.test[0].camera;
        // Axis permutation turned the stored (down, right, back) columns
        // into the identity rotation.
        let rot = cam.rotation();
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(rot[(r, c)], f64::from(u8::from(r == c)), epsilon = 1e-12);
            }
        }
        assert_eq!((cam.width, cam.height), (16, 12));
        assert_abs_diff_eq!(cam.focal_x, 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cam.near, 1.0);
        assert_abs_diff_eq!(cam.far, 8.0);
        // Test views are indices 0 and 8; translations carry the index.
        assert_abs_diff_eq!(ds.test[0].camera.translation()[0], 0.0);
        assert_abs_diff_eq!(ds.test[1].camera.translation()[0], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn four_times_downsample_of_standard_capture() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 2, (3024.0, 4032.0, 3200.0), (1008, 756));
        let ds = load_llff(dir.path(), 4, [0.0; 3]).unwrap();
        let cam = &ds.test[0].camera;
        assert_eq!((cam.width, cam.height), (1008, 756));
        assert_abs_diff_eq!(cam.focal_x, 800.0, epsilon = 1e-12);
    }

    #[test]
    fn malformed_fixtures_are_rejected() {
        // Wrong row width.
        let dir = tempfile::tempdir().unwrap();
        npy::write_f64_2d(&dir.path().join("poses_bounds.npy"), &Array2::zeros((3, 16))).unwrap();
        std::fs::create_dir(dir.path().join("images_4")).unwrap();
        let err = load_llff(dir.path(), 4, [0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("17"), "{err}");

        // Image count mismatch: 3 rows, 2 images.
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Array2::zeros((3, 17));
        for i in 0..3 {
            let r = row([0.0; 3], 48.0, 64.0, 80.0, 1.0, 8.0);
            for (c, v) in r.iter().enumerate() {
                rows[[i, c]] = *v;
            }
        }
        npy::write_f64_2d(&dir.path().join("poses_bounds.npy"), &rows).unwrap();
        std::fs::create_dir(dir.path().join("images_4")).unwrap();
        for i in 0..2 {
            image::RgbImage::from_pixel(16, 12, image::Rgb([0, 0, 0]))
                .save(dir.path().join(format!("images_4/image{i:03}.png")))
                .unwrap();
        }
        let err = load_llff(dir.path(), 4, [0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("3 pose rows"), "{err}");

        // Inverted bounds.
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Array2::zeros((1, 17));
        let mut r = row([0.0; 3], 48.0, 64.0, 80.0, 1.0, 8.0);
        r[15] = 8.0;
        r[16] = 1.0;
        for (c, v) in r.iter().enumerate() {
            rows[[0, c]] = *v;
        }
        npy::write_f64_2d(&dir.path().join("poses_bounds.npy"), &rows).unwrap();
        std::fs::create_dir(dir.path().join("images_4")).unwrap();
        image::RgbImage::from_pixel(16, 12, image::Rgb([0, 0, 0]))
            .save(dir.path().join("images_4/image000.png"))
            .unwrap();
        let err = load_llff(dir.path(), 4, [0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("near < far"), "{err}");
    }
}
