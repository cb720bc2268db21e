//! Convolution and sub-pixel-shuffle primitives (f64, CHW layout).
//!
//! All convolutions are 3x3, stride 1, with single-pixel reflective padding,
//! so spatial shape is preserved and constant inputs stay constant. Forward
//! uses im2col + one matrix product; backward folds the column gradient back
//! through the reflection.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reflected index for single-pixel padding: -1 -> 1, n -> n-2.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    i as usize
}

/// [C, H, W] -> [C*9, H*W] patch matrix under reflective padding.
fn im2col(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * 9, h * w));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ch * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    for xx in 0..w {
                        let sx = reflect(xx as isize + kx as isize - 1, w);
                        cols[[row, y * w + xx]] = x[[ch, sy, sx]];
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of im2col: folds [C*9, H*W] gradients back onto [C, H, W].
fn col2im(dcols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ch * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = reflect(y as isize + ky as isize - 1, h);
                    for xx in 0..w {
                        let sx = reflect(xx as isize + kx as isize - 1, w);
                        dx[[ch, sy, sx]] += dcols[[row, y * w + xx]];
                    }
                }
            }
        }
    }
    dx
}

/// 3x3 same-size convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// [out, in, 3, 3].
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    /// Fan-in uniform init.
    pub fn init(out_ch: usize, in_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
        Conv2d {
            weight: Array4::from_shape_simple_fn((out_ch, in_ch, 3, 3), || {
                rng.gen_range(-bound..bound)
            }),
            bias: Array1::from_shape_simple_fn(out_ch, || rng.gen_range(-bound..bound)),
        }
    }

    /// Initializes a x2 sub-pixel convolution (`4 * base_out` outputs) with
    /// all four shuffle phases identical, so the following shuffle acts as
    /// nearest-neighbor upsampling at initialization. This keeps constant
    /// inputs constant (no checkerboard pattern from freshly random phases).
    pub fn init_subpixel2(base_out: usize, in_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = Conv2d::init(base_out, in_ch, rng);
        let mut weight = Array4::zeros((4 * base_out, in_ch, 3, 3));
        let mut bias = Array1::zeros(4 * base_out);
        for c in 0..base_out {
            for p in 0..4 {
                weight
                    .slice_mut(ndarray::s![4 * c + p, .., .., ..])
                    .assign(&base.weight.slice(ndarray::s![c, .., .., ..]));
                bias[4 * c + p] = base.bias[c];
            }
        }
        Conv2d { weight, bias }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Weight viewed as [out, in*9] for the column product.
    fn weight_mat(&self) -> Array2<f64> {
        let (o, i, _, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * 9))
            .expect("contiguous weight")
            .to_owned()
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_channels());
        let cols = im2col(x);
        let mut out = self.weight_mat().dot(&cols);
        for (o, mut row) in out.rows_mut().into_iter().enumerate() {
            row += self.bias[o];
        }
        out.into_shape_with_order((self.out_channels(), h, w)).expect("conv output shape")
    }

    /// Accumulates dW/db into `grads` and returns d(loss)/dx.
    pub fn backward(&self, x: &Array3<f64>, dout: &Array3<f64>, grads: &mut ConvGrads) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let o = self.out_channels();
        let dout_mat = dout
            .view()
            .into_shape_with_order((o, h * w))
            .expect("contiguous dout");
        let cols = im2col(x);
        let dw = dout_mat.dot(&cols.t());
        grads.weight += &dw
            .into_shape_with_order((o, c, 3, 3))
            .expect("weight grad shape");
        for (ch, g) in grads.bias.iter_mut().enumerate() {
            *g += dout_mat.row(ch).sum();
        }
        let dcols = self.weight_mat().t().dot(&dout_mat);
        col2im(&dcols, c, h, w)
    }
}

impl ConvGrads {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrads { weight: Array4::zeros(conv.weight.raw_dim()), bias: Array1::zeros(conv.bias.raw_dim()) }
    }
}

/// Sub-pixel shuffle, factor 2: [4C, H, W] -> [C, 2H, 2W] with
/// out[c, 2y+dy, 2x+dx] = in[4c + 2dy + dx, y, x].
pub fn pixel_shuffle2(x: &Array3<f64>) -> Array3<f64> {
    let (c4, h, w) = x.dim();
    debug_assert_eq!(c4 % 4, 0);
    let c = c4 / 4;
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for dy in 0..2usize {
            for dx in 0..2usize {
                for y in 0..h {
                    for xx in 0..w {
                        out[[ch, 2 * y + dy, 2 * xx + dx]] = x[[4 * ch + 2 * dy + dx, y, xx]];
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse permutation of [`pixel_shuffle2`], used in backward.
pub fn pixel_unshuffle2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = x.dim();
    debug_assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array3::zeros((4 * c, h, w));
    for ch in 0..c {
        for dy in 0..2usize {
            for dx in 0..2usize {
                for y in 0..h {
                    for xx in 0..w {
                        out[[4 * ch + 2 * dy + dx, y, xx]] = x[[ch, 2 * y + dy, 2 * xx + dx]];
                    }
                }
            }
        }
    }
    out
}
