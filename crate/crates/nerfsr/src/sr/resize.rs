//! Bilinear resampling on [H, W, C] images (f64) with an exact adjoint so the
//! non-learned upsampling baseline can still train the field through it.
//!
//! Sample positions use the half-pixel convention: output pixel `i` reads the
//! source at `(i + 0.5) * (src / dst) - 0.5`, with edge clamping. Upscaling a
//! two-pixel row `(0, 1)` by 2 therefore yields `(0, 0.25, 0.75, 1)`.

use crate::{Error, Result};
use ndarray::Array3;

/// Per-axis interpolation taps: indices of the two source nodes and the
/// weight of the second one.
fn taps(dst: usize, src: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            if src == 1 {
                return (0, 0, 0.0);
            }
            let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = (p.floor() as usize).min(src - 2);
            (i0, i0 + 1, p - i0 as f64)
        })
        .collect()
}

/// Resamples `[H, W, C]` to `[new_h, new_w, C]`.
pub fn bilinear_resize(x: &Array3<f64>, new_h: usize, new_w: usize) -> Result<Array3<f64>> {
    let (h, w, c) = x.dim();
    if h == 0 || w == 0 || new_h == 0 || new_w == 0 {
        return Err(Error::Shape(format!(
            "bilinear_resize needs nonzero extents, got {h}x{w} -> {new_h}x{new_w}"
        )));
    }
    let ty = taps(new_h, h);
    let tx = taps(new_w, w);
    let mut out = Array3::zeros((new_h, new_w, c));
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
            for ch in 0..c {
                out[[y, xx, ch]] = (1.0 - fy) * (1.0 - fx) * x[[y0, x0, ch]]
                    + (1.0 - fy) * fx * x[[y0, x1, ch]]
                    + fy * (1.0 - fx) * x[[y1, x0, ch]]
                    + fy * fx * x[[y1, x1, ch]];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters `dout` ([new_h, new_w, C]) back to
/// the source shape `[src_h, src_w, C]`.
pub fn bilinear_resize_backward(
    dout: &Array3<f64>,
    src_h: usize,
    src_w: usize,
) -> Result<Array3<f64>> {
    let (new_h, new_w, c) = dout.dim();
    if src_h == 0 || src_w == 0 || new_h == 0 || new_w == 0 {
        return Err(Error::Shape(format!(
            "bilinear_resize_backward needs nonzero extents, got {new_h}x{new_w} -> {src_h}x{src_w}"
        )));
    }
    let ty = taps(new_h, src_h);
    let tx = taps(new_w, src_w);
    let mut dx = Array3::zeros((src_h, src_w, c));
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let g = dout[[y, xx, ch]];
                dx[[y0, x0, ch]] += (1.0 - fy) * (1.0 - fx) * g;
                dx[[y0, x1, ch]] += (1.0 - fy) * fx * g;
                dx[[y1, x0, ch]] += fy * (1.0 - fx) * g;
                dx[[y1, x1, ch]] += fy * fx * g;
            }
        }
    }
    Ok(dx)
}

/// Upscales by an integer ratio; the non-learned baseline upsampler.
pub fn bilinear_upscale(x: &Array3<f64>, ratio: u32) -> Result<Array3<f64>> {
    if ratio == 0 {
        return Err(Error::InvalidArgument("upscale ratio must be positive".into()));
    }
    let (h, w, _) = x.dim();
    bilinear_resize(x, h * ratio as usize, w * ratio as usize)
}
