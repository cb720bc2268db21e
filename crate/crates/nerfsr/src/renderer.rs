//! Volume rendering: point sampling, alpha compositing, image assembly.
//!
//! The compositing rule is the classic emission-absorption sum
//! C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_{N+1} bg with
//! T_i = prod_{j<i} exp(-sigma_j delta_j). The training path keeps a cache
//! of the forward pass and computes analytic gradients for sigma, color and
//! every field parameter; see [`render_rays_backward`].

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sigmoid, FieldGrads, RadianceField};
use crate::geometry::{CameraModel, RayBundle};
use crate::rng;

/// Exponent clamp: exp(-80) underflows any visible contribution.
const MAX_EXPONENT: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Samples per ray.
    pub n_samples: usize,
    pub stratified: bool,
    pub background: [f64; 3],
    /// Rays per chunk in full-image rendering.
    pub chunk_size: usize,
    /// Samples with compositing weight below this skip color evaluation
    /// (contribute zero color, weight still counts). 0 disables.
    pub weight_threshold: f64,
    /// Seed for stratified jitter; streams are per-ray, so chunking and
    /// resume points cannot change the samples.
    pub seed: u64,
    pub compute_depth: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_samples: 192,
            stratified: false,
            background: [1.0, 1.0, 1.0],
            chunk_size: 4096,
            weight_threshold: 0.0,
            seed: 0,
            compute_depth: false,
        }
    }
}

/// Point samples along a bundle's rays.
#[derive(Debug, Clone)]
pub struct RaySamples {
    /// [M, N], strictly increasing per ray, within [near, far].
    pub t_values: Array2<f64>,
    /// [M, N]; delta_i = t_{i+1} - t_i, last delta = far - t_N.
    pub deltas: Array2<f64>,
    /// [M, N, 3] positions o + t d.
    pub positions: Array3<f64>,
}

/// How to place samples in their bins.
#[derive(Debug, Clone, Copy)]
pub enum Sampling {
    /// Deterministic bin midpoints.
    Midpoints,
    /// One uniform draw per bin; the stream for ray i is derived from
    /// (seed, ray_offset + i) so the result is chunking-invariant.
    Stratified { seed: u64, ray_offset: u64 },
}

pub fn sample_points(rays: &RayBundle, n_samples: usize, sampling: Sampling) -> Result<RaySamples> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    if !(rays.near < rays.far) {
        return Err(Error::InvalidArgument(format!(
            "require near < far, got {} .. {}",
            rays.near, rays.far
        )));
    }
    let m = rays.len();
    let n = n_samples;
    let span = rays.far - rays.near;
    let bin = span / n as f64;
    let mut t_values = Array2::zeros((m, n));
    for i in 0..m {
        match sampling {
            Sampling::Midpoints => {
                for s in 0..n {
                    t_values[[i, s]] = rays.near + bin * (s as f64 + 0.5);
                }
            }
            Sampling::Stratified { seed, ray_offset } => {
                let mut r = rng::stream(seed, &[rng::phase::STRATIFIED, ray_offset + i as u64]);
                for s in 0..n {
                    let u: f64 = r.gen_range(0.0..1.0);
                    t_values[[i, s]] = rays.near + bin * (s as f64 + u);
                }
            }
        }
    }
    let mut deltas = Array2::zeros((m, n));
    for i in 0..m {
        for s in 0..n - 1 {
            deltas[[i, s]] = t_values[[i, s + 1]] - t_values[[i, s]];
        }
        deltas[[i, n - 1]] = rays.far - t_values[[i, n - 1]];
    }
    let (o, d) = rays.flat();
    let mut positions = Array3::zeros((m, n, 3));
    for i in 0..m {
        for s in 0..n {
            let t = t_values[[i, s]];
            for c in 0..3 {
                positions[[i, s, c]] = o[[i, c]] + t * d[[i, c]];
            }
        }
    }
    Ok(RaySamples { t_values, deltas, positions })
}

/// Composited ray colors plus per-sample weights.
#[derive(Debug, Clone)]
pub struct CompositeOutput {
    /// [M, 3].
    pub rgb: Array2<f64>,
    /// [M, N]: w_i = T_i (1 - exp(-sigma_i delta_i)).
    pub weights: Array2<f64>,
}

pub fn composite(
    sigmas: ArrayView2<'_, f64>,
    colors: ArrayView3<'_, f64>,
    deltas: ArrayView2<'_, f64>,
    background: [f64; 3],
) -> Result<CompositeOutput> {
    let (m, n) = sigmas.dim();
    if colors.dim() != (m, n, 3) || deltas.dim() != (m, n) {
        return Err(Error::Shape(format!(
            "composite shapes disagree: sigmas {:?}, colors {:?}, deltas {:?}",
            sigmas.dim(),
            colors.dim(),
            deltas.dim()
        )));
    }
    if sigmas.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("negative sigma".into()));
    }
    if deltas.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("negative delta".into()));
    }
    let mut rgb = Array2::zeros((m, 3));
    let mut weights = Array2::zeros((m, n));
    for i in 0..m {
        let mut transmittance = 1.0;
        let mut acc = [0.0; 3];
        for s in 0..n {
            let a = (sigmas[[i, s]] * deltas[[i, s]]).min(MAX_EXPONENT);
            let alpha = 1.0 - (-a).exp();
            let w = transmittance * alpha;
            weights[[i, s]] = w;
            for c in 0..3 {
                acc[c] += w * colors[[i, s, c]];
            }
            transmittance *= 1.0 - alpha;
        }
        for c in 0..3 {
            rgb[[i, c]] = acc[c] + transmittance * background[c];
        }
    }
    Ok(CompositeOutput { rgb, weights })
}

/// Per-sample scalar reference for Eq.-1 compositing, evaluating T_i as an
/// explicit product for every sample. Used by tests as an oracle.
#[doc(hidden)]
pub fn composite_scalar_reference(
    sigmas: ArrayView2<'_, f64>,
    colors: ArrayView3<'_, f64>,
    deltas: ArrayView2<'_, f64>,
    background: [f64; 3],
) -> Array2<f64> {
    let (m, n) = sigmas.dim();
    let mut rgb = Array2::zeros((m, 3));
    for i in 0..m {
        for c in 0..3 {
            let mut total = 0.0;
            for s in 0..n {
                let mut transmittance = 1.0;
                for j in 0..s {
                    transmittance *= (-(sigmas[[i, j]] * deltas[[i, j]]).min(MAX_EXPONENT)).exp();
                }
                let alpha = 1.0 - (-(sigmas[[i, s]] * deltas[[i, s]]).min(MAX_EXPONENT)).exp();
                total += transmittance * alpha * colors[[i, s, c]];
            }
            let mut tail = 1.0;
            for j in 0..n {
                tail *= (-(sigmas[[i, j]] * deltas[[i, j]]).min(MAX_EXPONENT)).exp();
            }
            rgb[[i, c]] = total + tail * background[c];
        }
    }
    rgb
}

/// Everything the backward pass needs to differentiate a forward render.
#[derive(Debug, Clone)]
pub struct RenderCache {
    origins: Array2<f64>,
    directions: Array2<f64>,
    t_values: Array2<f64>,
    deltas: Array2<f64>,
    /// Pre-activation density decode per sample; only valid where in_box.
    raws: Array2<f64>,
    in_box: Array2<bool>,
    weights: Array2<f64>,
    /// (ray, sample) pairs whose color was evaluated, in scan order.
    active: Vec<(u32, u32)>,
    /// [A, in_dim] color-decoder inputs for the active samples.
    x_active: Array2<f64>,
    /// [A, 3] decoder outputs.
    colors_active: Array2<f64>,
    background: [f64; 3],
}

/// Forward render of M flat rays.
pub struct RaysRender {
    pub rgb: Array2<f64>,
    pub accumulation: Array1<f64>,
    /// Expected ray depth sum_i w_i t_i (zero where nothing accumulated).
    pub depth: Array1<f64>,
    pub cache: Option<RenderCache>,
}

/// Renders flat rays; `ray_offset` positions the stratified streams of this
/// call within the bundle (pass the chunk start when chunking).
pub fn render_rays(
    field: &RadianceField,
    origins: ArrayView2<'_, f64>,
    directions: ArrayView2<'_, f64>,
    near: f64,
    far: f64,
    config: &RenderConfig,
    ray_offset: u64,
    want_cache: bool,
) -> Result<RaysRender> {
    let m = origins.shape()[0];
    let n = config.n_samples;
    let bundle_like = RayBundle {
        origins: origins.to_owned().insert_axis(Axis(1)),
        directions: directions.to_owned().insert_axis(Axis(1)),
        near,
        far,
    };
    let sampling = if config.stratified {
        Sampling::Stratified { seed: config.seed, ray_offset }
    } else {
        Sampling::Midpoints
    };
    let samples = sample_points(&bundle_like, n, sampling)?;

    let bbox = field.bounding_box();
    let shift = field.config.density_shift;
    let mut raws = Array2::zeros((m, n));
    let mut in_box = Array2::from_elem((m, n), false);
    let mut weights = Array2::zeros((m, n));
    let mut feat = vec![0.0; field.config.density_channels];
    let mut scratch = vec![0.0; 3 * field.config.density_rank];
    let mut dirs_unit = Vec::with_capacity(m);
    let mut active: Vec<(u32, u32)> = Vec::new();
    for i in 0..m {
        let norm = (0..3).map(|c| directions[[i, c]].powi(2)).sum::<f64>().sqrt();
        dirs_unit.push([
            directions[[i, 0]] / norm,
            directions[[i, 1]] / norm,
            directions[[i, 2]] / norm,
        ]);
        let mut transmittance = 1.0;
        for s in 0..n {
            let p = [
                samples.positions[[i, s, 0]],
                samples.positions[[i, s, 1]],
                samples.positions[[i, s, 2]],
            ];
            let mut sigma = 0.0;
            if bbox.contains(&p) {
                let raw = field.density_raw(&p, &mut feat, &mut scratch);
                raws[[i, s]] = raw;
                in_box[[i, s]] = true;
                sigma = crate::field::softplus(raw + shift);
            }
            let a = (sigma * samples.deltas[[i, s]]).min(MAX_EXPONENT);
            let alpha = 1.0 - (-a).exp();
            let w = transmittance * alpha;
            weights[[i, s]] = w;
            transmittance *= 1.0 - alpha;
            if w > config.weight_threshold {
                active.push((i as u32, s as u32));
            }
            if transmittance < 1e-12 {
                // Remaining samples carry no visible weight; they stay
                // exactly zero, matching the full scan to f64 precision.
                break;
            }
        }
    }

    // Batched color evaluation for the active samples.
    let positions_active: Vec<[f64; 3]> = active
        .iter()
        .map(|&(i, s)| {
            [
                samples.positions[[i as usize, s as usize, 0]],
                samples.positions[[i as usize, s as usize, 1]],
                samples.positions[[i as usize, s as usize, 2]],
            ]
        })
        .collect();
    let dirs_active: Vec<[f64; 3]> = active.iter().map(|&(i, _)| dirs_unit[i as usize]).collect();
    let x_active = field.color_inputs(&positions_active, &dirs_active);
    let colors_active = field.color_decoder.forward(x_active.view());

    let mut rgb = Array2::zeros((m, 3));
    let mut accumulation = Array1::zeros(m);
    let mut depth = Array1::zeros(m);
    for i in 0..m {
        let mut acc = 0.0;
        let mut dep = 0.0;
        for s in 0..n {
            let w = weights[[i, s]];
            acc += w;
            dep += w * samples.t_values[[i, s]];
        }
        accumulation[i] = acc;
        depth[i] = dep;
        for c in 0..3 {
            rgb[[i, c]] = (1.0 - acc) * config.background[c];
        }
    }
    for (row, &(i, s)) in active.iter().enumerate() {
        let w = weights[[i as usize, s as usize]];
        for c in 0..3 {
            rgb[[i as usize, c]] += w * colors_active[[row, c]];
        }
    }

    let cache = want_cache.then(|| RenderCache {
        origins: origins.to_owned(),
        directions: directions.to_owned(),
        t_values: samples.t_values,
        deltas: samples.deltas,
        raws,
        in_box,
        weights,
        active,
        x_active,
        colors_active,
        background: config.background,
    });
    Ok(RaysRender { rgb, accumulation, depth, cache })
}

/// Analytic backward of [`render_rays`]: given d(loss)/d(rgb) per ray,
/// accumulates gradients for every field parameter.
pub fn render_rays_backward(
    field: &RadianceField,
    cache: &RenderCache,
    d_rgb: ArrayView2<'_, f64>,
    grads: &mut FieldGrads,
) {
    let (m, n) = cache.raws.dim();
    let shift = field.config.density_shift;

    // Per-ray sparse color rows: map (ray, sample) -> active row.
    // `active` is sorted by construction; walk it per ray.
    let mut d_colors = Array2::zeros(cache.colors_active.raw_dim());
    let mut active_cursor = 0usize;

    let mut feat = vec![0.0; field.config.density_channels];
    let mut dfeat = vec![0.0; field.config.density_channels];
    let mut scratch = vec![0.0; 3 * field.config.density_rank];
    let mut alphas = vec![0.0; n];
    let mut trans = vec![0.0; n + 1];
    let mut c_tilde = vec![[0.0f64; 3]; n];

    for i in 0..m {
        // Recompute alpha and transmittance chains from cached raw values.
        for s in 0..n {
            let sigma = if cache.in_box[[i, s]] {
                crate::field::softplus(cache.raws[[i, s]] + shift)
            } else {
                0.0
            };
            let a = (sigma * cache.deltas[[i, s]]).min(MAX_EXPONENT);
            alphas[s] = 1.0 - (-a).exp();
        }
        trans[0] = 1.0;
        for s in 0..n {
            trans[s + 1] = trans[s] * (1.0 - alphas[s]);
        }
        // Colors: zero except where evaluated.
        for item in c_tilde.iter_mut() {
            *item = [0.0; 3];
        }
        let ray_active_start = active_cursor;
        while active_cursor < cache.active.len() && cache.active[active_cursor].0 as usize == i {
            let (_, s) = cache.active[active_cursor];
            for c in 0..3 {
                c_tilde[s as usize][c] = cache.colors_active[[active_cursor, c]];
            }
            active_cursor += 1;
        }
        let dc_ray = [d_rgb[[i, 0]], d_rgb[[i, 1]], d_rgb[[i, 2]]];

        // Color gradients: dC/dc_i = w_i.
        for row in ray_active_start..active_cursor {
            let (_, s) = cache.active[row];
            let w = cache.weights[[i, s as usize]];
            for c in 0..3 {
                d_colors[[row, c]] = w * dc_ray[c];
            }
        }

        // Density gradients via the suffix accumulator:
        // dC/dsigma_i = delta_i (T_{i+1} c_i - S_i),
        // S_i = sum_{k>i} w_k c_k + T_{N+1} bg.
        let mut suffix = [
            trans[n] * cache.background[0],
            trans[n] * cache.background[1],
            trans[n] * cache.background[2],
        ];
        for s in (0..n).rev() {
            if cache.in_box[[i, s]] {
                let mut dsigma = 0.0;
                for c in 0..3 {
                    dsigma += dc_ray[c] * (trans[s + 1] * c_tilde[s][c] - suffix[c]);
                }
                dsigma *= cache.deltas[[i, s]];
                if dsigma != 0.0 {
                    let draw = dsigma * sigmoid(cache.raws[[i, s]] + shift);
                    let p = point_at(cache, i, s);
                    field.density_grid.features(&p, &mut feat, &mut scratch);
                    field.density_decoder.backward_feat(
                        &feat,
                        draw,
                        &mut dfeat,
                        &mut grads.density_decoder,
                    );
                    field.density_grid.backward(&p, &dfeat, &mut grads.density);
                }
            }
            let w = cache.weights[[i, s]];
            for c in 0..3 {
                suffix[c] += w * c_tilde[s][c];
            }
        }
    }

    // Appearance path: one batched MLP backward, then scatter into the grid.
    if !cache.active.is_empty() {
        let dx = field.color_decoder.backward(
            cache.x_active.view(),
            &cache.colors_active,
            &d_colors,
            &mut grads.color,
        );
        let ch = field.config.appearance_channels;
        for (row, &(i, s)) in cache.active.iter().enumerate() {
            let p = point_at(cache, i as usize, s as usize);
            let dx_row = dx.row(row);
            let dfeat_app = &dx_row.as_slice().unwrap()[..ch];
            field.appearance_grid.backward(&p, dfeat_app, &mut grads.appearance);
        }
    }
}

fn point_at(cache: &RenderCache, i: usize, s: usize) -> [f64; 3] {
    let t = cache.t_values[[i, s]];
    [
        cache.origins[[i, 0]] + t * cache.directions[[i, 0]],
        cache.origins[[i, 1]] + t * cache.directions[[i, 1]],
        cache.origins[[i, 2]] + t * cache.directions[[i, 2]],
    ]
}

/// Full-image render output.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// [H, W, 3] in [0, 1].
    pub rgb: Array3<f64>,
    /// [H, W] sum of compositing weights.
    pub accumulation: Array2<f64>,
    /// [H, W] expected ray depth, when requested.
    pub depth: Option<Array2<f64>>,
    pub render_seconds: f64,
}

/// Renders a camera view in chunks; pixels are identical for any chunk size.
pub fn render_image(
    field: &RadianceField,
    camera: &CameraModel,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    let rays = crate::geometry::generate_rays(camera, None)?;
    render_bundle(field, &rays, config)
}

/// Renders a prepared ray bundle (e.g. one already warped to NDC) in chunks;
/// pixels are identical for any chunk size.
pub fn render_bundle(
    field: &RadianceField,
    rays: &RayBundle,
    config: &RenderConfig,
) -> Result<RenderOutput> {
    if config.chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk_size must be >= 1".into()));
    }
    let start = std::time::Instant::now();
    let (h, w) = (rays.height(), rays.width());
    let m = rays.len();
    let (o, d) = rays.flat();

    let chunk_starts: Vec<usize> = (0..m).step_by(config.chunk_size).collect();
    let results: Vec<Result<RaysRender>> = {
        use rayon::prelude::*;
        chunk_starts
            .par_iter()
            .map(|&start| {
                let end = (start + config.chunk_size).min(m);
                render_rays(
                    field,
                    o.slice(ndarray::s![start..end, ..]),
                    d.slice(ndarray::s![start..end, ..]),
                    rays.near,
                    rays.far,
                    config,
                    start as u64,
                    false,
                )
            })
            .collect()
    };

    let mut rgb = Array3::zeros((h, w, 3));
    let mut accumulation = Array2::zeros((h, w));
    let mut depth = config.compute_depth.then(|| Array2::zeros((h, w)));
    for (&chunk_start, result) in chunk_starts.iter().zip(results) {
        let r = result?;
        for row in 0..r.rgb.shape()[0] {
            let flat = chunk_start + row;
            let (y, x) = (flat / w, flat % w);
            for c in 0..3 {
                rgb[[y, x, c]] = r.rgb[[row, c]];
            }
            accumulation[[y, x]] = r.accumulation[row];
            if let Some(dep) = depth.as_mut() {
                dep[[y, x]] = r.depth[row];
            }
        }
    }
    Ok(RenderOutput { rgb, accumulation, depth, render_seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{DensityDecoderKind, FieldConfig};
    use crate::geometry::Aabb;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};

    fn bundle(m: usize, near: f64, far: f64) -> RayBundle {
        let mut origins = Array3::zeros((m, 1, 3));
        let mut directions = Array3::zeros((m, 1, 3));
        for i in 0..m {
            origins[[i, 0, 2]] = 4.0;
            directions[[i, 0, 2]] = -1.0;
        }
        RayBundle { origins, directions, near, far }
    }

    #[test]
    fn midpoint_samples_match_hand_values() {
        let rays = bundle(1, 0.0, 1.0);
        let s = sample_points(&rays, 4, Sampling::Midpoints).unwrap();
        let got: Vec<f64> = s.t_values.row(0).to_vec();
        assert_eq!(got, vec![0.125, 0.375, 0.625, 0.875]);
        let d: Vec<f64> = s.deltas.row(0).to_vec();
        assert_abs_diff_eq!(d[0], 0.25);
        assert_abs_diff_eq!(d[3], 0.125); // far - t_N
    }

    #[test]
    fn single_sample_is_span_midpoint() {
        let rays = bundle(1, 2.0, 6.0);
        let s = sample_points(&rays, 1, Sampling::Midpoints).unwrap();
        assert_abs_diff_eq!(s.t_values[[0, 0]], 4.0);
        assert_abs_diff_eq!(s.deltas[[0, 0]], 2.0);
    }

    #[test]
    fn stratified_draws_stay_in_their_bins() {
        let rays = bundle(8, 1.0, 3.0);
        let s = sample_points(&rays, 16, Sampling::Stratified { seed: 5, ray_offset: 0 }).unwrap();
        let bin = 2.0 / 16.0;
        for i in 0..8 {
            for k in 0..16 {
                let t = s.t_values[[i, k]];
                assert!(t >= 1.0 + bin * k as f64 && t < 1.0 + bin * (k + 1) as f64);
                if k > 0 {
                    assert!(t > s.t_values[[i, k - 1]]);
                }
            }
        }
        // Same offset reproduces; shifted offset moves the per-ray streams.
        let s2 = sample_points(&rays, 16, Sampling::Stratified { seed: 5, ray_offset: 0 }).unwrap();
        assert_eq!(s.t_values, s2.t_values);
        let s3 = sample_points(&rays, 16, Sampling::Stratified { seed: 5, ray_offset: 1 }).unwrap();
        assert_eq!(s3.t_values.row(0), s.t_values.row(1));
    }

    #[test]
    fn zero_samples_is_an_error() {
        let rays = bundle(1, 0.0, 1.0);
        assert!(sample_points(&rays, 0, Sampling::Midpoints).is_err());
    }

    #[test]
    fn zero_density_composites_to_background() {
        let sigmas = Array2::zeros((3, 5));
        let colors = Array3::from_elem((3, 5, 3), 0.7);
        let deltas = Array2::from_elem((3, 5), 0.2);
        let bg = [0.1, 0.5, 0.9];
        let out = composite(sigmas.view(), colors.view(), deltas.view(), bg).unwrap();
        for i in 0..3 {
            for c in 0..3 {
                assert_eq!(out.rgb[[i, c]], bg[c]);
            }
        }
        assert_eq!(out.weights.sum(), 0.0);
    }

    #[test]
    fn single_sample_half_opacity_hand_value() {
        let sigmas = array![[2f64.ln()]];
        let deltas = array![[1.0]];
        let mut colors = Array3::zeros((1, 1, 3));
        colors[[0, 0, 0]] = 1.0;
        let out = composite(sigmas.view(), colors.view(), deltas.view(), [0.0; 3]).unwrap();
        assert_abs_diff_eq!(out.weights[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.rgb[[0, 0]], 0.5, epsilon = 1e-12);
        assert_eq!(out.rgb[[0, 1]], 0.0);
    }

    #[test]
    fn two_sample_hand_value() {
        let l = 2f64.ln();
        let sigmas = array![[l, l]];
        let deltas = array![[1.0, 1.0]];
        let mut colors = Array3::zeros((1, 2, 3));
        colors[[0, 0, 0]] = 1.0;
        colors[[0, 1, 1]] = 1.0;
        let out = composite(sigmas.view(), colors.view(), deltas.view(), [0.0; 3]).unwrap();
        assert_abs_diff_eq!(out.rgb[[0, 0]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.rgb[[0, 1]], 0.25, epsilon = 1e-12);
        assert_eq!(out.rgb[[0, 2]], 0.0);
    }

    #[test]
    fn negative_inputs_are_rejected() {
        let colors = Array3::zeros((1, 1, 3));
        let r = composite(array![[-0.1]].view(), colors.view(), array![[1.0]].view(), [0.0; 3]);
        assert!(r.is_err());
        let r = composite(array![[0.1]].view(), colors.view(), array![[-1.0]].view(), [0.0; 3]);
        assert!(r.is_err());
    }

    fn random_composite_case(seed: u64, m: usize, n: usize) -> (Array2<f64>, Array3<f64>, Array2<f64>) {
        let mut r = rng::stream(seed, &[7777]);
        let sigmas = Array2::from_shape_simple_fn((m, n), || r.gen_range(0.0..30.0));
        let colors = Array3::from_shape_simple_fn((m, n, 3), || r.gen_range(0.0..1.0));
        let deltas = Array2::from_shape_simple_fn((m, n), || r.gen_range(0.0..0.3));
        (sigmas, colors, deltas)
    }

    #[test]
    fn vectorized_composite_matches_scalar_oracle() {
        let (sigmas, colors, deltas) = random_composite_case(1, 100, 24);
        let bg = [0.2, 0.4, 0.8];
        let fast = composite(sigmas.view(), colors.view(), deltas.view(), bg).unwrap();
        let slow = composite_scalar_reference(sigmas.view(), colors.view(), deltas.view(), bg);
        let mut max_abs: f64 = 0.0;
        for (a, b) in fast.rgb.iter().zip(slow.iter()) {
            max_abs = max_abs.max((a - b).abs());
        }
        assert!(max_abs <= 1e-5, "max abs {max_abs}");
    }

    #[test]
    fn weights_sum_with_tail_transmittance_to_one() {
        let (sigmas, _, deltas) = random_composite_case(2, 100, 24);
        let colors = Array3::zeros((100, 24, 3));
        let out = composite(sigmas.view(), colors.view(), deltas.view(), [0.0; 3]).unwrap();
        for i in 0..100 {
            let w_sum: f64 = out.weights.row(i).sum();
            let mut tail = 1.0;
            for s in 0..24 {
                tail *= (-(sigmas[[i, s]] * deltas[[i, s]]).min(80.0)).exp();
            }
            assert_abs_diff_eq!(w_sum + tail, 1.0, epsilon = 1e-6);
            // Weights are a valid partition: each in [0, 1].
            for s in 0..24 {
                assert!((0.0..=1.0).contains(&out.weights[[i, s]]));
            }
        }
    }

    fn test_field() -> RadianceField {
        let config = FieldConfig {
            resolution: [4, 4, 4],
            density_rank: 2,
            appearance_rank: 2,
            appearance_channels: 6,
            hidden_dim: 8,
            density_shift: 0.0,
            density_decoder: DensityDecoderKind::Affine,
            factor_std: 0.4,
            bounding_box: Aabb::cube(1.5),
            ..FieldConfig::default()
        };
        RadianceField::init(config, 21)
    }

    #[test]
    fn zero_density_field_renders_background() {
        let mut field = test_field();
        field.config.density_shift = -1e6; // softplus(raw - 1e6) == 0 in f64
        let camera = CameraModel::centered(
            6,
            5,
            5.0,
            crate::geometry::look_at_pose(
                nalgebra::Vector3::new(0.0, 0.0, 4.0),
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::new(0.0, 1.0, 0.0),
            ),
            2.0,
            6.0,
        );
        let config = RenderConfig {
            n_samples: 16,
            background: [0.3, 0.6, 0.9],
            ..RenderConfig::default()
        };
        let out = render_image(&field, &camera, &config).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                for c in 0..3 {
                    assert_eq!(out.rgb[[y, x, c]], config.background[c]);
                }
                assert_eq!(out.accumulation[[y, x]], 0.0);
            }
        }
    }

    #[test]
    fn chunk_size_does_not_change_pixels() {
        let field = test_field();
        let camera = CameraModel::centered(
            7,
            6,
            6.0,
            crate::geometry::look_at_pose(
                nalgebra::Vector3::new(0.5, -0.3, 4.0),
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::new(0.0, 1.0, 0.0),
            ),
            2.0,
            6.5,
        );
        let mut config = RenderConfig {
            n_samples: 24,
            stratified: true,
            seed: 9,
            chunk_size: 1,
            background: [1.0; 3],
            compute_depth: true,
            ..RenderConfig::default()
        };
        let a = render_image(&field, &camera, &config).unwrap();
        config.chunk_size = 4096;
        let b = render_image(&field, &camera, &config).unwrap();
        config.chunk_size = 5;
        let c = render_image(&field, &camera, &config).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.rgb, c.rgb);
        assert_eq!(a.accumulation, b.accumulation);
        assert_eq!(a.depth.unwrap(), c.depth.unwrap());
    }

    #[test]
    fn opaque_constant_slab_renders_its_color() {
        // Opaque everywhere inside the box, decoder forced to 0.5 grey.
        let mut field = test_field();
        for k in 0..3 {
            field.density_grid.plane_factors[k].fill(1.0);
            field.density_grid.line_factors[k].fill(1.0);
        }
        field.density_grid.mixing.fill(0.0);
        field.density_grid.mixing[[0, 0]] = 1.0;
        field.density_decoder = crate::field::DensityDecoder::Affine {
            weight: array![500.0],
            bias: array![0.0],
        };
        field.color_decoder.w0.fill(0.0);
        field.color_decoder.b0.fill(0.0);
        field.color_decoder.w1.fill(0.0);
        field.color_decoder.b1.fill(0.0);
        // Camera wide enough that corner rays miss the box.
        let camera = CameraModel::centered(
            9,
            9,
            2.2,
            crate::geometry::look_at_pose(
                nalgebra::Vector3::new(0.0, 0.0, 4.0),
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::new(0.0, 1.0, 0.0),
            ),
            2.0,
            7.0,
        );
        let config = RenderConfig { n_samples: 256, background: [1.0; 3], ..RenderConfig::default() };
        let out = render_image(&field, &camera, &config).unwrap();
        // Center ray pierces the slab head-on.
        for c in 0..3 {
            assert!((out.rgb[[4, 4, c]] - 0.5).abs() < 0.02, "center {:?}", out.rgb[[4, 4, c]]);
        }
        // Corner rays miss the 1.5-halfwidth box entirely.
        for c in 0..3 {
            assert_eq!(out.rgb[[0, 0, c]], 1.0);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let field = test_field();
        let origins = array![[0.3, -0.2, 4.0], [-0.5, 0.4, 3.8]];
        let dz = -1.0f64;
        let directions = array![[0.05, -0.02, dz], [-0.08, 0.01, dz]];
        let config = RenderConfig {
            n_samples: 8,
            background: [0.3, 0.2, 0.1],
            ..RenderConfig::default()
        };
        let target = array![[0.2, 0.7, 0.4], [0.9, 0.1, 0.5]];

        let loss_of = |f: &RadianceField| -> f64 {
            let r = render_rays(
                f,
                origins.view(),
                directions.view(),
                2.0,
                6.0,
                &config,
                0,
                false,
            )
            .unwrap();
            (&r.rgb - &target).mapv(|v| v * v).sum()
        };

        let r = render_rays(
            &field,
            origins.view(),
            directions.view(),
            2.0,
            6.0,
            &config,
            0,
            true,
        )
        .unwrap();
        let d_rgb = (&r.rgb - &target) * 2.0;
        let mut grads = crate::field::FieldGrads::zeros_like(&field);
        render_rays_backward(&field, r.cache.as_ref().unwrap(), d_rgb.view(), &mut grads);

        let analytic: Vec<(String, Vec<f64>)> = grads
            .params()
            .into_iter()
            .map(|(n, v)| (n, v.to_vec()))
            .collect();
        let step = 1e-4;
        let mut worst: f64 = 0.0;
        let mut field_mut = field.clone();
        for (name, g) in &analytic {
            let n_params = g.len();
            // Probe a deterministic spread of indices per array.
            let stride = (n_params / 7).max(1);
            for idx in (0..n_params).step_by(stride) {
                let orig = {
                    let mut params = field_mut.params_mut();
                    let slot = params.iter_mut().find(|(n, _)| n == name).unwrap();
                    let orig = slot.1[idx];
                    slot.1[idx] = orig + step;
                    orig
                };
                let hi = loss_of(&field_mut);
                {
                    let mut params = field_mut.params_mut();
                    let slot = params.iter_mut().find(|(n, _)| n == name).unwrap();
                    slot.1[idx] = orig - step;
                }
                let lo = loss_of(&field_mut);
                {
                    let mut params = field_mut.params_mut();
                    let slot = params.iter_mut().find(|(n, _)| n == name).unwrap();
                    slot.1[idx] = orig;
                }
                let fd = (hi - lo) / (2.0 * step);
                let an = g[idx];
                if fd.abs() < 1e-10 && an.abs() < 1e-10 {
                    continue;
                }
                let rel = (fd - an).abs() / fd.abs().max(an.abs());
                worst = worst.max(rel);
                assert!(rel < 1e-3, "{name}[{idx}]: analytic {an} vs fd {fd} (rel {rel})");
            }
        }
        assert!(worst > 0.0, "finite-difference sweep never exercised a nonzero gradient");
    }
}
