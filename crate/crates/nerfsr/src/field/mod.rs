//! Hybrid radiance field: factorized feature grids plus small decoders.
//!
//! Density is the shifted-softplus of a (near-)identity decode of the
//! density grid's feature; color is a 2-layer perceptron over appearance
//! features concatenated with a sinusoidal encoding of the view direction.

pub mod grid;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use grid::{FactorizedGrid, GridGrads, COMPONENT_AXES};

use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::io::Archive;
use crate::rng;

pub const DIRECTION_UNIT_TOL: f64 = 1e-3;

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// d/dx softplus(x) = sigmoid(x).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityDecoderKind {
    Identity,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub bounding_box: Aabb,
    pub resolution: [usize; 3],
    pub density_rank: usize,
    pub density_channels: usize,
    pub appearance_rank: usize,
    pub appearance_channels: usize,
    pub hidden_dim: usize,
    pub dir_freqs: usize,
    pub density_shift: f64,
    pub density_decoder: DensityDecoderKind,
    pub factor_std: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            bounding_box: Aabb::cube(1.5),
            resolution: [64, 64, 64],
            density_rank: 8,
            density_channels: 1,
            appearance_rank: 24,
            appearance_channels: 27,
            hidden_dim: 64,
            dir_freqs: 2,
            density_shift: -10.0,
            density_decoder: DensityDecoderKind::Identity,
            factor_std: 0.1,
        }
    }
}

/// F_sigma: maps the density grid's feature vector to a raw scalar.
#[derive(Debug, Clone)]
pub enum DensityDecoder {
    Identity,
    Affine { weight: Array1<f64>, bias: Array1<f64> },
}

impl DensityDecoder {
    fn decode(&self, feat: &[f64]) -> f64 {
        match self {
            DensityDecoder::Identity => feat[0],
            DensityDecoder::Affine { weight, bias } => {
                bias[0] + weight.iter().zip(feat).map(|(w, f)| w * f).sum::<f64>()
            }
        }
    }

    /// Given d(loss)/d(raw), writes d(loss)/d(feature) and accumulates the
    /// decoder's own gradient.
    pub(crate) fn backward_feat(
        &self,
        feat: &[f64],
        draw: f64,
        dfeat: &mut [f64],
        grads: &mut Option<(Array1<f64>, Array1<f64>)>,
    ) {
        match self {
            DensityDecoder::Identity => dfeat[0] = draw,
            DensityDecoder::Affine { weight, .. } => {
                for (df, w) in dfeat.iter_mut().zip(weight) {
                    *df = draw * w;
                }
                let (gw, gb) = grads.as_mut().expect("affine decoder grads");
                for (g, f) in gw.iter_mut().zip(feat) {
                    *g += draw * f;
                }
                gb[0] += draw;
            }
        }
    }
}

/// F_c: 2-layer perceptron, ReLU hidden, sigmoid output.
#[derive(Debug, Clone)]
pub struct ColorDecoder {
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
}

impl ColorDecoder {
    fn init(in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let uniform = |rng: &mut ChaCha8Rng, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.gen_range(-bound..bound)
        };
        ColorDecoder {
            w0: Array2::from_shape_simple_fn((hidden, in_dim), || uniform(rng, in_dim)),
            b0: Array1::from_shape_simple_fn(hidden, || uniform(rng, in_dim)),
            w1: Array2::from_shape_simple_fn((3, hidden), || uniform(rng, hidden)),
            b1: Array1::from_shape_simple_fn(3, || uniform(rng, hidden)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w0.shape()[0]
    }

    /// Batched forward: x is [M, in_dim], result [M, 3] in [0,1].
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.dot(&self.w0.t());
        h += &self.b0;
        h.mapv_inplace(|v| v.max(0.0));
        let mut y = h.dot(&self.w1.t());
        y += &self.b1;
        y.mapv_inplace(sigmoid);
        y
    }

    /// Backward for a batch evaluated at `x` with outputs `y`: accumulates
    /// weight gradients and returns d(loss)/dx. The hidden layer is
    /// recomputed rather than cached.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        y: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut MlpGrads,
    ) -> Array2<f64> {
        let mut h = x.dot(&self.w0.t());
        h += &self.b0;
        h.mapv_inplace(|v| v.max(0.0));
        // dz1 = dy * y * (1 - y)  (sigmoid')
        let dz1 = dy * y * (1.0 - y);
        grads.w1 += &dz1.t().dot(&h);
        grads.b1 += &dz1.sum_axis(ndarray::Axis(0));
        let mut dh = dz1.dot(&self.w1);
        // ReLU mask from the recomputed activations.
        ndarray::Zip::from(&mut dh).and(&h).for_each(|d, &hv| {
            if hv <= 0.0 {
                *d = 0.0;
            }
        });
        grads.w0 += &dh.t().dot(&x);
        grads.b0 += &dh.sum_axis(ndarray::Axis(0));
        dh.dot(&self.w0)
    }
}

/// Raw direction + 2 sin/cos octaves per component.
pub fn encoding_dim(freqs: usize) -> usize {
    3 + 6 * freqs
}

pub fn encode_direction(d: &[f64; 3], freqs: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoding_dim(freqs));
    out[..3].copy_from_slice(d);
    let mut j = 3;
    for l in 0..freqs {
        let s = (1u64 << l) as f64;
        for c in 0..3 {
            out[j] = (s * d[c]).sin();
            out[j + 3] = (s * d[c]).cos();
            j += 1;
        }
        j += 3;
    }
}

/// The radiance field of the rendering pipeline.
#[derive(Debug, Clone)]
pub struct RadianceField {
    pub config: FieldConfig,
    pub density_grid: FactorizedGrid,
    pub appearance_grid: FactorizedGrid,
    pub density_decoder: DensityDecoder,
    pub color_decoder: ColorDecoder,
}

/// Gradient buffers for every learnable parameter of a field.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub density: GridGrads,
    pub appearance: GridGrads,
    pub density_decoder: Option<(Array1<f64>, Array1<f64>)>,
    pub color: MlpGrads,
}

impl RadianceField {
    pub fn init(config: FieldConfig, seed: u64) -> Self {
        let mut d_rng = rng::stream(seed, &[rng::phase::FIELD_INIT, 0]);
        let mut a_rng = rng::stream(seed, &[rng::phase::FIELD_INIT, 1]);
        let mut dec_rng = rng::stream(seed, &[rng::phase::FIELD_INIT, 2]);
        let mut mlp_rng = rng::stream(seed, &[rng::phase::FIELD_INIT, 3]);
        // Density mixing starts at 1 (plain component sum); appearance
        // mixing draws fan-in normals.
        let density_grid = FactorizedGrid::init(
            config.resolution,
            config.density_rank,
            config.density_channels,
            config.bounding_box,
            config.factor_std,
            Some(1.0),
            &mut d_rng,
        );
        let appearance_grid = FactorizedGrid::init(
            config.resolution,
            config.appearance_rank,
            config.appearance_channels,
            config.bounding_box,
            config.factor_std,
            None,
            &mut a_rng,
        );
        let density_decoder = match config.density_decoder {
            DensityDecoderKind::Identity => DensityDecoder::Identity,
            DensityDecoderKind::Affine => {
                let bound = 1.0 / (config.density_channels as f64).sqrt();
                DensityDecoder::Affine {
                    weight: Array1::from_shape_simple_fn(config.density_channels, || {
                        dec_rng.gen_range(-bound..bound)
                    }),
                    bias: Array1::zeros(1),
                }
            }
        };
        let in_dim = config.appearance_channels + encoding_dim(config.dir_freqs);
        let color_decoder = ColorDecoder::init(in_dim, config.hidden_dim, &mut mlp_rng);
        RadianceField { config, density_grid, appearance_grid, density_decoder, color_decoder }
    }

    pub fn bounding_box(&self) -> Aabb {
        self.config.bounding_box
    }

    /// Raw (pre-activation, pre-shift) density decode at an in-box point.
    /// `feat`/`scratch` are caller scratch of lengths density_channels / 3R.
    pub(crate) fn density_raw(&self, p: &[f64; 3], feat: &mut [f64], scratch: &mut [f64]) -> f64 {
        self.density_grid.features(p, feat, scratch);
        self.density_decoder.decode(feat)
    }

    pub fn density_from_raw(&self, raw: f64) -> f64 {
        softplus(raw + self.config.density_shift)
    }

    /// Volumetric density; exactly 0 outside the bounding box.
    pub fn query_density(&self, positions: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if positions.shape()[1] != 3 {
            return Err(Error::Shape("positions must be [M, 3]".into()));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite position".into()));
        }
        let mut feat = vec![0.0; self.config.density_channels];
        let mut scratch = vec![0.0; 3 * self.config.density_rank];
        let bbox = self.bounding_box();
        let mut out = Array1::zeros(positions.shape()[0]);
        for (i, row) in positions.rows().into_iter().enumerate() {
            let p = [row[0], row[1], row[2]];
            if bbox.contains(&p) {
                let raw = self.density_raw(&p, &mut feat, &mut scratch);
                out[i] = self.density_from_raw(raw);
            }
        }
        Ok(out)
    }

    /// Builds the color decoder's input rows for given points/directions.
    pub(crate) fn color_inputs(
        &self,
        positions: &[[f64; 3]],
        directions: &[[f64; 3]],
    ) -> Array2<f64> {
        let ch = self.config.appearance_channels;
        let enc = encoding_dim(self.config.dir_freqs);
        let mut x = Array2::zeros((positions.len(), ch + enc));
        let mut scratch = vec![0.0; 3 * self.config.appearance_rank];
        for (i, (p, d)) in positions.iter().zip(directions).enumerate() {
            let mut row = x.row_mut(i);
            let row_slice = row.as_slice_mut().expect("row contiguous");
            self.appearance_grid.features(p, &mut row_slice[..ch], &mut scratch);
            encode_direction(d, self.config.dir_freqs, &mut row_slice[ch..]);
        }
        x
    }

    /// View-dependent color in [0,1]^3 for unit `directions`.
    pub fn query_color(
        &self,
        positions: ArrayView2<'_, f64>,
        directions: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        if positions.shape()[1] != 3 || directions.shape()[1] != 3 {
            return Err(Error::Shape("positions and directions must be [M, 3]".into()));
        }
        if positions.shape()[0] != directions.shape()[0] {
            return Err(Error::Shape("positions and directions must have equal M".into()));
        }
        if positions.iter().chain(directions.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite input".into()));
        }
        let mut ps = Vec::with_capacity(positions.shape()[0]);
        let mut ds = Vec::with_capacity(positions.shape()[0]);
        for (p, d) in positions.rows().into_iter().zip(directions.rows()) {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (norm - 1.0).abs() > DIRECTION_UNIT_TOL {
                return Err(Error::InvalidArgument(format!(
                    "direction norm {norm} deviates from 1 beyond {DIRECTION_UNIT_TOL}"
                )));
            }
            ps.push([p[0], p[1], p[2]]);
            ds.push([d[0], d[1], d[2]]);
        }
        let x = self.color_inputs(&ps, &ds);
        Ok(self.color_decoder.forward(x.view()))
    }

    /// Exact byte count of all learnable parameters (f64 storage).
    pub fn size_bytes(&self) -> u64 {
        self.param_count() as u64 * 8
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, v)| v.len()).sum()
    }

    /// Trilinearly upsamples both grids onto `new_resolution`.
    pub fn upsample_grids(&self, new_resolution: [usize; 3]) -> Result<RadianceField> {
        for a in 0..3 {
            if new_resolution[a] < self.config.resolution[a] {
                return Err(Error::InvalidArgument(format!(
                    "upsample cannot shrink axis {a}: {} -> {}",
                    self.config.resolution[a], new_resolution[a]
                )));
            }
        }
        let mut out = self.clone();
        out.config.resolution = new_resolution;
        out.density_grid = self.density_grid.upsampled(new_resolution);
        out.appearance_grid = self.appearance_grid.upsampled(new_resolution);
        Ok(out)
    }

    /// Canonical parameter walk; checkpoint, optimizer and size accounting
    /// all follow this order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        push_grid_params(&mut out, "density", &self.density_grid);
        if let DensityDecoder::Affine { weight, bias } = &self.density_decoder {
            out.push(("density_decoder.weight".into(), weight.as_slice().unwrap()));
            out.push(("density_decoder.bias".into(), bias.as_slice().unwrap()));
        }
        push_grid_params(&mut out, "appearance", &self.appearance_grid);
        let c = &self.color_decoder;
        out.push(("color.w0".into(), c.w0.as_slice().unwrap()));
        out.push(("color.b0".into(), c.b0.as_slice().unwrap()));
        out.push(("color.w1".into(), c.w1.as_slice().unwrap()));
        out.push(("color.b1".into(), c.b1.as_slice().unwrap()));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let affine = matches!(self.density_decoder, DensityDecoder::Affine { .. });
        let mut out = Vec::new();
        push_grid_params_mut(&mut out, "density", &mut self.density_grid);
        if affine {
            if let DensityDecoder::Affine { weight, bias } = &mut self.density_decoder {
                out.push(("density_decoder.weight".into(), weight.as_slice_mut().unwrap()));
                out.push(("density_decoder.bias".into(), bias.as_slice_mut().unwrap()));
            }
        }
        push_grid_params_mut(&mut out, "appearance", &mut self.appearance_grid);
        let c = &mut self.color_decoder;
        out.push(("color.w0".into(), c.w0.as_slice_mut().unwrap()));
        out.push(("color.b0".into(), c.b0.as_slice_mut().unwrap()));
        out.push(("color.w1".into(), c.w1.as_slice_mut().unwrap()));
        out.push(("color.b1".into(), c.b1.as_slice_mut().unwrap()));
        out
    }

    /// Shapes matching [`Self::params`], for checkpoint headers.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let grid_shapes = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, g: &FactorizedGrid| {
            for k in 0..3 {
                out.push((format!("{prefix}.plane{k}"), g.plane_factors[k].shape().to_vec()));
            }
            for k in 0..3 {
                out.push((format!("{prefix}.line{k}"), g.line_factors[k].shape().to_vec()));
            }
            out.push((format!("{prefix}.mixing"), g.mixing.shape().to_vec()));
        };
        grid_shapes(&mut out, "density", &self.density_grid);
        if let DensityDecoder::Affine { weight, bias } = &self.density_decoder {
            out.push(("density_decoder.weight".into(), weight.shape().to_vec()));
            out.push(("density_decoder.bias".into(), bias.shape().to_vec()));
        }
        grid_shapes(&mut out, "appearance", &self.appearance_grid);
        let c = &self.color_decoder;
        out.push(("color.w0".into(), c.w0.shape().to_vec()));
        out.push(("color.b0".into(), c.b0.shape().to_vec()));
        out.push(("color.w1".into(), c.w1.shape().to_vec()));
        out.push(("color.b1".into(), c.b1.shape().to_vec()));
        out
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::with_meta("field", &self.config)?;
        let shapes = self.param_shapes();
        for ((name, data), (sname, shape)) in self.params().into_iter().zip(shapes) {
            debug_assert_eq!(name, sname);
            a.push(name, &shape, data.to_vec());
        }
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<RadianceField> {
        if archive.kind != "field" {
            return Err(Error::Missing(format!(
                "expected a 'field' archive, got '{}'",
                archive.kind
            )));
        }
        let config: FieldConfig = archive.meta_as()?;
        let mut field = RadianceField::init(config, 0);
        for (name, values) in field.params_mut() {
            let (shape, data) = archive.require(&name)?;
            let n: usize = shape.iter().product();
            if n != values.len() {
                return Err(Error::Shape(format!(
                    "array {name}: archive has {n} elements, field expects {}",
                    values.len()
                )));
            }
            values.copy_from_slice(data);
        }
        Ok(field)
    }
}

fn push_grid_params<'a>(
    out: &mut Vec<(String, &'a [f64])>,
    prefix: &str,
    g: &'a FactorizedGrid,
) {
    for k in 0..3 {
        out.push((format!("{prefix}.plane{k}"), g.plane_factors[k].as_slice().unwrap()));
    }
    for k in 0..3 {
        out.push((format!("{prefix}.line{k}"), g.line_factors[k].as_slice().unwrap()));
    }
    out.push((format!("{prefix}.mixing"), g.mixing.as_slice().unwrap()));
}

fn push_grid_params_mut<'a>(
    out: &mut Vec<(String, &'a mut [f64])>,
    prefix: &str,
    g: &'a mut FactorizedGrid,
) {
    let [p0, p1, p2] = &mut g.plane_factors;
    out.push((format!("{prefix}.plane0"), p0.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.plane1"), p1.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.plane2"), p2.as_slice_mut().unwrap()));
    let [l0, l1, l2] = &mut g.line_factors;
    out.push((format!("{prefix}.line0"), l0.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.line1"), l1.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.line2"), l2.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.mixing"), g.mixing.as_slice_mut().unwrap()));
}

impl FieldGrads {
    pub fn zeros_like(field: &RadianceField) -> Self {
        FieldGrads {
            density: GridGrads::zeros_like(&field.density_grid),
            appearance: GridGrads::zeros_like(&field.appearance_grid),
            density_decoder: match &field.density_decoder {
                DensityDecoder::Identity => None,
                DensityDecoder::Affine { weight, bias } => {
                    Some((Array1::zeros(weight.raw_dim()), Array1::zeros(bias.raw_dim())))
                }
            },
            color: MlpGrads {
                w0: Array2::zeros(field.color_decoder.w0.raw_dim()),
                b0: Array1::zeros(field.color_decoder.b0.raw_dim()),
                w1: Array2::zeros(field.color_decoder.w1.raw_dim()),
                b1: Array1::zeros(field.color_decoder.b1.raw_dim()),
            },
        }
    }

    /// Gradient slices in the same order as [`RadianceField::params`].
    pub fn params(&self) -> Vec<(String, &[f64])> {
        fn grid<'a>(out: &mut Vec<(String, &'a [f64])>, prefix: &str, g: &'a GridGrads) {
            for k in 0..3 {
                out.push((format!("{prefix}.plane{k}"), g.plane_factors[k].as_slice().unwrap()));
            }
            for k in 0..3 {
                out.push((format!("{prefix}.line{k}"), g.line_factors[k].as_slice().unwrap()));
            }
            out.push((format!("{prefix}.mixing"), g.mixing.as_slice().unwrap()));
        }
        let mut out = Vec::new();
        grid(&mut out, "density", &self.density);
        if let Some((w, b)) = &self.density_decoder {
            out.push(("density_decoder.weight".into(), w.as_slice().unwrap()));
            out.push(("density_decoder.bias".into(), b.as_slice().unwrap()));
        }
        grid(&mut out, "appearance", &self.appearance);
        out.push(("color.w0".into(), self.color.w0.as_slice().unwrap()));
        out.push(("color.b0".into(), self.color.b0.as_slice().unwrap()));
        out.push(("color.w1".into(), self.color.w1.as_slice().unwrap()));
        out.push(("color.b1".into(), self.color.b1.as_slice().unwrap()));
        out
    }
}
