//! PNG image I/O over [H, W, 3] f64 arrays with values in [0, 1].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};

/// Rounds to 8 bits, clamping to [0, 1] first.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Flat row-major RGB8 bytes of an image, as stored on disk.
pub fn to_u8_rgb(img: &Array3<f64>) -> Vec<u8> {
    img.iter().map(|&v| quantize_u8(v)).collect()
}

pub fn save_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, to_u8_rgb(img))
            .expect("buffer sized from image dims");
    buf.save(path)?;
    Ok(())
}

/// Loads a PNG as [H, W, 3] in [0, 1]. Alpha, when present, is composited
/// onto `background` (straight alpha: a*rgb + (1-a)*bg).
pub fn load_rgb(path: &Path, background: [f64; 3]) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path.to_path_buf(), io),
        other => Error::Image(other),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    match img {
        DynamicImage::ImageRgba8(rgba) => {
            for (x, y, p) in rgba.enumerate_pixels() {
                let a = p[3] as f64 / 255.0;
                for c in 0..3 {
                    let v = p[c] as f64 / 255.0;
                    out[[y as usize, x as usize, c]] = a * v + (1.0 - a) * background[c];
                }
            }
        }
        other => {
            let rgb = other.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[[y as usize, x as usize, c]] = p[c] as f64 / 255.0;
                }
            }
        }
    }
    Ok(out)
}
