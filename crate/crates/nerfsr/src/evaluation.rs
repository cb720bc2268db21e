//! Quality metrics (PSNR, SSIM, optional learned perceptual distance),
//! render-time and model-size profiling, and tabular report generation.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::View;
use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::geometry::{downscale_camera, generate_rays, ndc_warp, CameraModel};
use crate::io::{archive::Archive, png};
use crate::renderer::{render_bundle, RenderConfig};
use crate::rng;
use crate::sr::layers::Conv2d;
use crate::sr::SrNetwork;

/// Cap applied to infinite (zero-MSE) PSNR values when they enter reports.
pub const PSNR_SENTINEL_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in dB: `10·log10(peak² / MSE)` over all
/// pixels and channels. Identical images yield `+inf`; callers putting the
/// value in a table should cap it at [`PSNR_SENTINEL_DB`]. Values are used
/// as given (no clamping), so out-of-range inputs simply shift the MSE.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "psnr inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if peak <= 0.0 {
        return Err(Error::InvalidArgument(format!("psnr peak {peak} must be positive")));
    }
    let n = a.len() as f64;
    let mse: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let center = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn to_gray(img: &Array3<f64>) -> Array2<f64> {
    let (h, w, c) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).map(|ch| img[[y, x, ch]]).sum::<f64>() / c as f64
    })
}

/// Separable valid-window filter: output is (H-k+1, W-k+1).
fn valid_filter(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let mut rows = Array2::zeros((h, w - n + 1));
    for y in 0..h {
        for x in 0..w - n + 1 {
            rows[[y, x]] = (0..n).map(|i| k[i] * img[[y, x + i]]).sum::<f64>();
        }
    }
    let mut out = Array2::zeros((h - n + 1, w - n + 1));
    for y in 0..h - n + 1 {
        for x in 0..w - n + 1 {
            out[[y, x]] = (0..n).map(|i| k[i] * rows[[y + i, x]]).sum::<f64>();
        }
    }
    out
}

/// Structural similarity with the standard parameters: 11-tap Gaussian
/// window (sigma 1.5), k1 = 0.01, k2 = 0.03, peak 1.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    ssim_with(a, b, 11, 1.5, 0.01, 0.03)
}

/// SSIM over Gaussian-weighted valid windows of the channel-mean grayscale
/// images; returns the mean of the local similarity map, a value in [-1, 1].
pub fn ssim_with(
    a: &Array3<f64>,
    b: &Array3<f64>,
    window: usize,
    sigma: f64,
    k1: f64,
    k2: f64,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "ssim inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if window == 0 || sigma <= 0.0 || k1 <= 0.0 || k2 <= 0.0 {
        return Err(Error::InvalidArgument(
            "ssim needs window >= 1, sigma > 0, k1 > 0, k2 > 0".into(),
        ));
    }
    let (h, w, _) = a.dim();
    if h < window || w < window {
        return Err(Error::Shape(format!(
            "ssim window {window} exceeds image extent {w}x{h}"
        )));
    }
    let (peak, c1, c2) = (1.0, (k1 * 1.0f64).powi(2), (k2 * 1.0f64).powi(2));
    let _ = peak;
    let ga = to_gray(a);
    let gb = to_gray(b);
    let k = gaussian_kernel(window, sigma);
    let mu_a = valid_filter(&ga, &k);
    let mu_b = valid_filter(&gb, &k);
    let aa = valid_filter(&(&ga * &ga), &k);
    let bb = valid_filter(&(&gb * &gb), &k);
    let ab = valid_filter(&(&ga * &gb), &k);
    let mut total = 0.0;
    for (((((&ma, &mb), &saa), &sbb), &sab), _) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter())
        .zip(bb.iter())
        .zip(ab.iter())
        .zip(0..)
    {
        let var_a = saa - ma * ma;
        let var_b = sbb - mb * mb;
        let cov = sab - ma * mb;
        let map = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        total += map;
    }
    Ok(total / mu_a.len() as f64)
}

// ---------------------------------------------------------------------------
// Optional learned perceptual distance.
// ---------------------------------------------------------------------------

/// Result of the optional perceptual metric: a score when the external
/// feature network is on disk, an explicit status otherwise — never a
/// fabricated number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PerceptualScore {
    Available(f64),
    Unavailable(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PerceptualMeta {
    channels: usize,
    layers: usize,
}

/// Small convolutional feature extractor backing the perceptual metric:
/// `layers` stages of 3x3 conv + ReLU with 2x2 average pooling between
/// stages. The distance is the summed mean squared difference of
/// channel-normalized feature maps across stages.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    convs: Vec<Conv2d>,
}

fn avg_pool2(x: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    let (h2, w2) = (h / 2, w / 2);
    if h2 == 0 || w2 == 0 {
        return Err(Error::Shape(format!("feature map {w}x{h} too small to pool")));
    }
    let mut out = Array3::zeros((c, h2, w2));
    for ch in 0..c {
        for y in 0..h2 {
            for x2 in 0..w2 {
                out[[ch, y, x2]] = 0.25
                    * (x[[ch, 2 * y, 2 * x2]]
                        + x[[ch, 2 * y, 2 * x2 + 1]]
                        + x[[ch, 2 * y + 1, 2 * x2]]
                        + x[[ch, 2 * y + 1, 2 * x2 + 1]]);
            }
        }
    }
    Ok(out)
}

/// Per-pixel unit normalization across channels.
fn normalize_channels(f: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = f.dim();
    let mut out = f.clone();
    for y in 0..h {
        for x in 0..w {
            let norm: f64 = (0..c).map(|ch| f[[ch, y, x]] * f[[ch, y, x]]).sum::<f64>().sqrt();
            let scale = 1.0 / (norm + 1e-10);
            for ch in 0..c {
                out[[ch, y, x]] *= scale;
            }
        }
    }
    out
}

impl PerceptualNet {
    /// Randomly initialized stand-in network; real use loads trained weights
    /// via [`PerceptualNet::load`].
    pub fn init(channels: usize, layers: usize, seed: u64) -> Result<Self> {
        if channels == 0 || layers == 0 {
            return Err(Error::InvalidArgument(
                "perceptual net needs channels >= 1 and layers >= 1".into(),
            ));
        }
        let mut rng = rng::stream(seed, &[rng::phase::PERCEPTUAL_INIT]);
        let convs = (0..layers)
            .map(|l| Conv2d::init(channels, if l == 0 { 3 } else { channels }, &mut rng))
            .collect();
        Ok(Self { convs })
    }

    pub fn layers(&self) -> usize {
        self.convs.len()
    }

    fn features(&self, img: &Array3<f64>) -> Result<Vec<Array3<f64>>> {
        let (h, w, c) = img.dim();
        if c != 3 {
            return Err(Error::Shape(format!("perceptual input needs 3 channels, got {c}")));
        }
        let mut x = Array3::zeros((3, h, w));
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..3 {
                    x[[ch, y, xx]] = img[[y, xx, ch]];
                }
            }
        }
        let mut feats = Vec::with_capacity(self.convs.len());
        for (l, conv) in self.convs.iter().enumerate() {
            if x.dim().1 < 2 || x.dim().2 < 2 {
                return Err(Error::Shape(format!(
                    "image {w}x{h} too small for {} perceptual stages",
                    self.convs.len()
                )));
            }
            x = conv.forward(&x).mapv(|v| v.max(0.0));
            feats.push(normalize_channels(&x));
            if l + 1 < self.convs.len() {
                x = avg_pool2(&x)?;
            }
        }
        Ok(feats)
    }

    /// Layerwise feature distance: sum over stages of the mean squared
    /// difference of normalized feature maps. Zero iff inputs agree.
    pub fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!(
                "perceptual inputs differ in shape: {:?} vs {:?}",
                a.dim(),
                b.dim()
            )));
        }
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = 0.0;
        for (xa, xb) in fa.iter().zip(&fb) {
            let n = xa.len() as f64;
            total +=
                xa.iter().zip(xb.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
        }
        Ok(total)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = PerceptualMeta {
            channels: self.convs[0].out_channels(),
            layers: self.convs.len(),
        };
        let mut ar = Archive::with_meta("perceptual", &meta)?;
        for (l, conv) in self.convs.iter().enumerate() {
            ar.push(
                format!("conv{l}.weight"),
                conv.weight.shape(),
                conv.weight.iter().copied().collect(),
            );
            ar.push(format!("conv{l}.bias"), conv.bias.shape(), conv.bias.to_vec());
        }
        ar.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ar = Archive::read(path)?;
        if ar.kind != "perceptual" {
            return Err(Error::Archive {
                path: path.to_path_buf(),
                reason: format!("expected a perceptual archive, found kind {:?}", ar.kind),
            });
        }
        let meta: PerceptualMeta = ar.meta_as()?;
        let mut net = Self::init(meta.channels, meta.layers, 0)?;
        for (l, conv) in net.convs.iter_mut().enumerate() {
            let (wshape, wdata) = ar.require(&format!("conv{l}.weight"))?;
            if wshape != conv.weight.shape() {
                return Err(Error::Archive {
                    path: path.to_path_buf(),
                    reason: format!(
                        "conv{l}.weight has shape {wshape:?}, expected {:?}",
                        conv.weight.shape()
                    ),
                });
            }
            conv.weight.as_slice_mut().expect("contiguous").copy_from_slice(wdata);
            let (_, bdata) = ar.require(&format!("conv{l}.bias"))?;
            conv.bias.as_slice_mut().expect("contiguous").copy_from_slice(bdata);
        }
        Ok(net)
    }
}

/// Learned perceptual distance between two images, gated on the external
/// network weights being present at `weights`: missing weights yield an
/// explicit [`PerceptualScore::Unavailable`] rather than an error or a
/// made-up value. A corrupt or mismatched weights file is a real error.
pub fn perceptual_distance(
    a: &Array3<f64>,
    b: &Array3<f64>,
    weights: &Path,
) -> Result<PerceptualScore> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "perceptual inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if !weights.exists() {
        return Ok(PerceptualScore::Unavailable(format!(
            "no perceptual weights at {}",
            weights.display()
        )));
    }
    let net = PerceptualNet::load(weights)?;
    Ok(PerceptualScore::Available(net.distance(a, b)?))
}

// ---------------------------------------------------------------------------
// Pipelines and profiling.
// ---------------------------------------------------------------------------

/// Parameter footprint of a composed pipeline, in bytes (f64 storage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelBytes {
    pub field: u64,
    pub sr: u64,
    pub total: u64,
}

/// How a pipeline maps its low-resolution render to the camera's full frame.
#[derive(Debug, Clone)]
pub enum Upscaler {
    /// Render at the camera's own resolution; no upscaling.
    None,
    /// Learned super-resolution head.
    Network(SrNetwork),
    /// Fixed bilinear upscaling at the given ratio (baseline method).
    Bilinear(usize),
}

impl Upscaler {
    pub fn ratio(&self) -> usize {
        match self {
            Upscaler::None => 1,
            Upscaler::Network(sr) => sr.ratio() as usize,
            Upscaler::Bilinear(r) => *r,
        }
    }
}

/// A frozen render pipeline: a radiance field plus an upscaler. With a
/// ratio-r upscaler, views render at `1/r` resolution and are mapped back to
/// the camera's full frame; without one, the field renders the full frame
/// directly.
#[derive(Debug, Clone)]
pub struct RenderPipeline {
    pub field: RadianceField,
    pub upscaler: Upscaler,
    pub config: RenderConfig,
    /// Warp rays to normalized device coordinates (forward-facing scenes).
    pub ndc: bool,
}

impl RenderPipeline {
    pub fn ratio(&self) -> usize {
        self.upscaler.ratio()
    }

    /// Renders the full frame for `camera`. Output is [H, W, 3] at the
    /// camera's own resolution; super-resolved output may overshoot [0, 1]
    /// slightly and is returned unclamped.
    pub fn render_view(&self, camera: &CameraModel) -> Result<Array3<f64>> {
        let ratio = self.ratio();
        if ratio == 0 {
            return Err(Error::InvalidArgument("upscaler ratio must be positive".into()));
        }
        let lr_camera;
        let camera = if ratio > 1 {
            lr_camera = downscale_camera(camera, ratio)?;
            &lr_camera
        } else {
            camera
        };
        let mut rays = generate_rays(camera, None)?;
        if self.ndc {
            rays = ndc_warp(&rays, camera, camera.near);
        }
        let out = render_bundle(&self.field, &rays, &self.config)?;
        match &self.upscaler {
            Upscaler::None => Ok(out.rgb),
            Upscaler::Network(sr) => sr.upscale(&out.rgb),
            Upscaler::Bilinear(r) => crate::sr::resize::bilinear_upscale(&out.rgb, *r as u32),
        }
    }

    pub fn size_bytes(&self) -> ModelBytes {
        let field = self.field.size_bytes();
        let sr = match &self.upscaler {
            Upscaler::Network(sr) => sr.size_bytes() as u64,
            _ => 0,
        };
        ModelBytes { field, sr, total: field + sr }
    }

    /// Content hash over every parameter of both components; profiling and
    /// evaluation must leave it unchanged.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, data) in self.field.params() {
            hasher.update(name.as_bytes());
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        if let Upscaler::Network(sr) = &self.upscaler {
            for (name, data) in sr.params() {
                hasher.update(name.as_bytes());
                for v in data {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Wall-clock render profile: seconds are per frame, the standard deviation
/// is across repeats (population), and bytes are the pipeline footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderProfile {
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub bytes: ModelBytes,
}

/// Times full-frame renders over `cameras`, `repeats` times each, after one
/// untimed warm-up render. Pure with respect to the pipeline (checksum
/// before equals checksum after). Run without concurrent load.
pub fn profile_render(
    pipeline: &RenderPipeline,
    cameras: &[CameraModel],
    repeats: usize,
) -> Result<RenderProfile> {
    if cameras.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument(
            "profile_render needs at least one camera and one repeat".into(),
        ));
    }
    pipeline.render_view(&cameras[0])?;
    let mut per_repeat = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        for camera in cameras {
            pipeline.render_view(camera)?;
        }
        per_repeat.push(t0.elapsed().as_secs_f64() / cameras.len() as f64);
    }
    let mean = per_repeat.iter().sum::<f64>() / repeats as f64;
    let var = per_repeat.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / repeats as f64;
    Ok(RenderProfile { mean_seconds: mean, std_seconds: var.sqrt(), bytes: pipeline.size_bytes() })
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

/// Per-scene evaluation summary. PSNR values are capped at
/// [`PSNR_SENTINEL_DB`] so the report serializes cleanly; `render_seconds`
/// is `None` when timing was not requested, keeping reports from
/// identical-seed runs byte-comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    pub method: String,
    pub config_fingerprint: String,
    pub view_names: Vec<String>,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub perceptual: PerceptualScore,
    pub render_seconds: Option<f64>,
    pub model_bytes: ModelBytes,
}

impl EvalReport {
    /// Machine-readable twin of the table row, at full precision.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Identity and measurement options for [`evaluate_views`] /
/// [`report_from_renders`].
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub scene: String,
    pub method: String,
    pub config_fingerprint: String,
    /// Measure per-frame render seconds (one warm-up render excluded).
    pub time_renders: bool,
    /// Score the optional perceptual metric against this weights file.
    pub perceptual_weights: Option<std::path::PathBuf>,
}

impl EvalOptions {
    pub fn new(scene: &str, method: &str, fingerprint: &str) -> Self {
        Self {
            scene: scene.into(),
            method: method.into(),
            config_fingerprint: fingerprint.into(),
            time_renders: false,
            perceptual_weights: None,
        }
    }
}

/// Builds a report by scoring prepared renders against ground-truth views.
/// Deterministic: rebuilding from the same stored renders is bit-identical.
/// Renders are clamped to [0, 1] before scoring.
pub fn report_from_renders(
    renders: &[Array3<f64>],
    views: &[View],
    bytes: ModelBytes,
    render_seconds: Option<f64>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if renders.len() != views.len() {
        return Err(Error::Shape(format!(
            "{} renders scored against {} views",
            renders.len(),
            views.len()
        )));
    }
    let mut view_names = Vec::with_capacity(views.len());
    let mut psnr_db = Vec::with_capacity(views.len());
    let mut ssim_vals = Vec::with_capacity(views.len());
    let mut perceptual_sum = 0.0;
    let mut perceptual_status: Option<String> = None;
    for (render, view) in renders.iter().zip(views) {
        let clamped = render.mapv(|v| v.clamp(0.0, 1.0));
        view_names.push(view.name.clone());
        psnr_db.push(psnr(&clamped, &view.image, 1.0)?.min(PSNR_SENTINEL_DB));
        ssim_vals.push(ssim(&clamped, &view.image)?);
        if let Some(weights) = &opts.perceptual_weights {
            match perceptual_distance(&clamped, &view.image, weights)? {
                PerceptualScore::Available(d) => perceptual_sum += d,
                PerceptualScore::Unavailable(reason) => perceptual_status = Some(reason),
            }
        }
    }
    let n = views.len().max(1) as f64;
    let perceptual = match (&opts.perceptual_weights, perceptual_status) {
        (None, _) => PerceptualScore::Unavailable("perceptual metric not requested".into()),
        (Some(_), Some(reason)) => PerceptualScore::Unavailable(reason),
        (Some(_), None) => PerceptualScore::Available(perceptual_sum / n),
    };
    Ok(EvalReport {
        scene: opts.scene.clone(),
        method: opts.method.clone(),
        config_fingerprint: opts.config_fingerprint.clone(),
        mean_psnr_db: psnr_db.iter().sum::<f64>() / n,
        mean_ssim: ssim_vals.iter().sum::<f64>() / n,
        view_names,
        psnr_db,
        ssim: ssim_vals,
        perceptual,
        render_seconds,
        model_bytes: bytes,
    })
}

/// Renders every view with the pipeline and scores the results. Per-view
/// PSNR/SSIM are averaged view-then-mean. When timing is requested, one
/// warm-up render of the first view is excluded from the per-frame mean.
pub fn evaluate_views(
    pipeline: &RenderPipeline,
    views: &[View],
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Array3<f64>>)> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("evaluate_views needs at least one view".into()));
    }
    if opts.time_renders {
        pipeline.render_view(&views[0].camera)?;
    }
    let t0 = Instant::now();
    let mut renders = Vec::with_capacity(views.len());
    for view in views {
        renders.push(pipeline.render_view(&view.camera)?);
    }
    let seconds = opts
        .time_renders
        .then(|| t0.elapsed().as_secs_f64() / views.len() as f64);
    let report = report_from_renders(&renders, views, pipeline.size_bytes(), seconds, opts)?;
    Ok((report, renders))
}

/// Writes each render and its ground truth as PNG pairs for audit:
/// `{name}_render.png` / `{name}_gt.png` with path separators flattened.
pub fn save_renders(dir: &Path, views: &[View], renders: &[Array3<f64>]) -> Result<()> {
    if renders.len() != views.len() {
        return Err(Error::Shape(format!(
            "{} renders for {} views",
            renders.len(),
            views.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    for (view, render) in views.iter().zip(renders) {
        let stem: String = view
            .name
            .trim_start_matches("./")
            .chars()
            .map(|c| if c == '/' || c == '\\' { '_' } else { c })
            .collect();
        let clamped = render.mapv(|v| v.clamp(0.0, 1.0));
        png::save_rgb(&dir.join(format!("{stem}_render.png")), &clamped)?;
        png::save_rgb(&dir.join(format!("{stem}_gt.png")), &view.image)?;
    }
    Ok(())
}

/// Plain-text table over reports: one aligned row per report, dB to two
/// decimals, SSIM to four. Deterministic formatting; the JSON twin keeps
/// full precision.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["scene", "method", "psnr_db", "ssim", "perceptual", "render_s", "size_mb"];
    let mut rows: Vec<[String; 7]> = vec![header.map(String::from)];
    for r in reports {
        let perceptual = match &r.perceptual {
            PerceptualScore::Available(d) => format!("{d:.4}"),
            PerceptualScore::Unavailable(_) => "--".into(),
        };
        let seconds = r.render_seconds.map(|s| format!("{s:.3}")).unwrap_or_else(|| "--".into());
        rows.push([
            r.scene.clone(),
            r.method.clone(),
            format!("{:.2}", r.mean_psnr_db),
            format!("{:.4}", r.mean_ssim),
            perceptual,
            seconds,
            format!("{:.2}", r.model_bytes.total as f64 / 1e6),
        ]);
    }
    let widths: Vec<usize> = (0..7)
        .map(|c| rows.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, RadianceField};
    use crate::sr::build_sr_network;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::Rng;

    fn constant(h: usize, w: usize, v: [f64; 3]) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(_, _, c)| v[c])
    }

    fn noisy(base: &Array3<f64>, amplitude: f64, seed: u64) -> Array3<f64> {
        let mut rng = rng::stream(seed, &[99]);
        base.mapv(|v| (v + amplitude * (rng.gen::<f64>() * 2.0 - 1.0)).clamp(0.0, 1.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = constant(4, 5, [0.3; 3]);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        // Constant offset 0.1 -> MSE 0.01 -> 20 dB.
        let b = constant(4, 5, [0.4; 3]);
        assert_abs_diff_eq!(psnr(&a, &b, 1.0).unwrap(), 20.0, epsilon = 1e-12);
        // 0.5 vs 0.0 -> MSE 0.25 -> 10 log10(4).
        let c = constant(4, 5, [0.5; 3]);
        let z = constant(4, 5, [0.0; 3]);
        assert_abs_diff_eq!(psnr(&c, &z, 1.0).unwrap(), 6.020599913279624, epsilon = 1e-12);
    }

    #[test]
    fn psnr_symmetry_and_errors() {
        let a = noisy(&constant(6, 6, [0.5; 3]), 0.3, 1);
        let b = noisy(&constant(6, 6, [0.5; 3]), 0.3, 2);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &constant(6, 7, [0.0; 3]), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = Array3::from_shape_fn((12, 12, 3), |(y, x, c)| {
            0.25 + 0.5 * ((y + x + c) as f64 / 27.0)
        });
        let mut last = f64::INFINITY;
        for (i, amp) in [0.02, 0.08, 0.2].iter().enumerate() {
            let db = psnr(&noisy(&base, *amp, 7 + i as u64), &base, 1.0).unwrap();
            assert!(db < last, "psnr did not decrease: {db} vs {last}");
            last = db;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_bounds() {
        let a = noisy(&constant(16, 16, [0.5; 3]), 0.4, 3);
        let b = noisy(&constant(16, 16, [0.5; 3]), 0.4, 4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s), "ssim {s} out of range");
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        let (c1v, c2v) = (0.3, 0.7);
        let a = constant(12, 13, [c1v; 3]);
        let b = constant(12, 13, [c2v; 3]);
        let c1 = 0.01f64.powi(2);
        let expected = (2.0 * c1v * c2v + c1) / (c1v * c1v + c2v * c2v + c1);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn ssim_rejects_undersized_images() {
        let a = constant(10, 16, [0.5; 3]);
        assert!(matches!(ssim(&a, &a).unwrap_err(), Error::Shape(_)));
        let b = constant(16, 10, [0.5; 3]);
        assert!(matches!(ssim(&b, &b).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn perceptual_missing_weights_reports_unavailable() {
        let a = constant(16, 16, [0.5; 3]);
        let path = std::path::Path::new("/nonexistent/weights.nsr");
        match perceptual_distance(&a, &a, path).unwrap() {
            PerceptualScore::Unavailable(reason) => {
                assert!(reason.contains("/nonexistent/weights.nsr"), "{reason}");
            }
            PerceptualScore::Available(_) => panic!("fabricated a score without weights"),
        }
        // Shape mismatch is a real error even without weights on disk.
        let b = constant(16, 17, [0.5; 3]);
        assert!(perceptual_distance(&a, &b, path).is_err());
    }

    #[test]
    fn perceptual_distance_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perceptual.nsr");
        PerceptualNet::init(8, 3, 42).unwrap().save(&path).unwrap();

        let base = Array3::from_shape_fn((24, 24, 3), |(y, x, c)| {
            0.2 + 0.6 * ((y as f64 / 23.0) * 0.5 + (x as f64 / 23.0) * 0.3 + c as f64 * 0.05)
        });
        match perceptual_distance(&base, &base, &path).unwrap() {
            PerceptualScore::Available(d) => assert_eq!(d, 0.0),
            s => panic!("expected a score, got {s:?}"),
        }
        let mut last = 0.0;
        for (i, amp) in [0.05, 0.15, 0.4].iter().enumerate() {
            let other = noisy(&base, *amp, 20 + i as u64);
            match perceptual_distance(&base, &other, &path).unwrap() {
                PerceptualScore::Available(d) => {
                    assert!(d > last, "distance not increasing: {d} vs {last}");
                    assert!(d >= 0.0);
                    last = d;
                }
                s => panic!("expected a score, got {s:?}"),
            }
        }
    }

    #[test]
    fn perceptual_net_round_trips_and_rejects_foreign_archives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.nsr");
        let net = PerceptualNet::init(4, 2, 9).unwrap();
        net.save(&path).unwrap();
        let loaded = PerceptualNet::load(&path).unwrap();
        let img = noisy(&constant(16, 16, [0.5; 3]), 0.3, 5);
        let other = noisy(&constant(16, 16, [0.5; 3]), 0.3, 6);
        assert_eq!(net.distance(&img, &other).unwrap(), loaded.distance(&img, &other).unwrap());

        let foreign = dir.path().join("f.nsr");
        Archive::new("field").write(&foreign).unwrap();
        assert!(matches!(PerceptualNet::load(&foreign).unwrap_err(), Error::Archive { .. }));
    }

    fn tiny_pipeline(with_sr: bool) -> RenderPipeline {
        let config = FieldConfig {
            resolution: [8, 8, 8],
            appearance_rank: 4,
            density_rank: 2,
            hidden_dim: 16,
            ..FieldConfig::default()
        };
        let field = RadianceField::init(config, 7);
        let upscaler = if with_sr {
            Upscaler::Network(build_sr_network(2, 2, 8, [0.5; 3], 3).unwrap())
        } else {
            Upscaler::None
        };
        let render = RenderConfig {
            n_samples: 16,
            stratified: false,
            chunk_size: 64,
            ..RenderConfig::default()
        };
        RenderPipeline { field, upscaler, config: render, ndc: false }
    }

    fn tiny_camera(size: usize) -> CameraModel {
        use nalgebra::Vector3;
        let pose = crate::geometry::look_at_pose(
            Vector3::new(0.0, 0.4, 3.0),
            Vector3::zeros(),
            Vector3::y(),
        );
        CameraModel::centered(size, size, size as f64, pose, 1.0, 5.0)
    }

    #[test]
    fn pipeline_composes_lr_render_with_sr_upscale() {
        let pipeline = tiny_pipeline(true);
        let camera = tiny_camera(16);
        let hr = pipeline.render_view(&camera).unwrap();
        assert_eq!(hr.dim(), (16, 16, 3));
        // Same thing assembled by hand: render the downscaled camera with
        // the bare field, then upscale.
        let bare = RenderPipeline { upscaler: Upscaler::None, ..pipeline.clone() };
        let lr_cam = downscale_camera(&camera, 2).unwrap();
        let lr = bare.render_view(&lr_cam).unwrap();
        let by_hand = match &pipeline.upscaler {
            Upscaler::Network(sr) => sr.upscale(&lr).unwrap(),
            _ => unreachable!(),
        };
        assert_eq!(hr, by_hand);
        // The bilinear baseline shares the LR render but not the upscaler.
        let baseline =
            RenderPipeline { upscaler: Upscaler::Bilinear(2), ..pipeline.clone() };
        let blin = baseline.render_view(&camera).unwrap();
        assert_eq!(blin, crate::sr::resize::bilinear_upscale(&lr, 2).unwrap());
        assert_eq!(baseline.size_bytes().sr, 0);
    }

    #[test]
    fn profiling_is_pure_and_additive() {
        let pipeline = tiny_pipeline(true);
        let before = pipeline.checksum();
        let profile = profile_render(&pipeline, &[tiny_camera(16)], 1).unwrap();
        assert_eq!(pipeline.checksum(), before);
        assert_eq!(profile.std_seconds, 0.0);
        assert_eq!(profile.bytes.total, profile.bytes.field + profile.bytes.sr);
        assert!(profile.bytes.sr > 0 && profile.bytes.field > 0);
        assert!(profile.mean_seconds > 0.0);
        assert!(profile_render(&pipeline, &[], 3).is_err());
        assert!(profile_render(&pipeline, &[tiny_camera(16)], 0).is_err());
    }

    fn fake_views(n: usize) -> Vec<View> {
        (0..n)
            .map(|i| View {
                name: format!("./test/r_{i}"),
                image: noisy(&constant(16, 16, [0.5; 3]), 0.3, 50 + i as u64),
                camera: tiny_camera(16),
            })
            .collect()
    }

    #[test]
    fn ground_truth_against_itself_hits_the_sentinel() {
        let views = fake_views(2);
        let renders: Vec<_> = views.iter().map(|v| v.image.clone()).collect();
        let bytes = ModelBytes { field: 8, sr: 0, total: 8 };
        let opts = EvalOptions::new("toy", "oracle", "cfg");
        let report = report_from_renders(&renders, &views, bytes, None, &opts).unwrap();
        assert_eq!(report.mean_psnr_db, PSNR_SENTINEL_DB);
        assert!(report.psnr_db.iter().all(|&p| p == PSNR_SENTINEL_DB));
        assert_eq!(report.mean_ssim, 1.0);
        assert_eq!(report.render_seconds, None);
    }

    #[test]
    fn report_json_round_trips_bitwise() {
        let views = fake_views(2);
        let renders: Vec<_> = views.iter().map(|v| noisy(&v.image, 0.1, 80)).collect();
        let bytes = ModelBytes { field: 100, sr: 24, total: 124 };
        let opts = EvalOptions::new("toy", "FT-RandPatch", "abc123");
        let report = report_from_renders(&renders, &views, bytes, None, &opts).unwrap();
        let json = report.to_json().unwrap();
        let back = EvalReport::from_json(&json).unwrap();
        assert_eq!(report, back);
        assert_eq!(json, back.to_json().unwrap());
    }

    #[test]
    fn report_regenerated_from_stored_renders_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let views = fake_views(2);
        let renders: Vec<_> = views.iter().map(|v| noisy(&v.image, 0.05, 90)).collect();
        save_renders(dir.path(), &views, &renders).unwrap();

        let mut reports = Vec::new();
        for _ in 0..2 {
            let loaded: Vec<_> = views
                .iter()
                .map(|v| {
                    let stem = v.name.trim_start_matches("./").replace('/', "_");
                    png::load_rgb(&dir.path().join(format!("{stem}_render.png")), [0.0; 3])
                        .unwrap()
                })
                .collect();
            let bytes = ModelBytes { field: 1, sr: 2, total: 3 };
            let opts = EvalOptions::new("toy", "m", "f");
            reports.push(report_from_renders(&loaded, &views, bytes, None, &opts).unwrap());
        }
        assert_eq!(reports[0], reports[1]);
        assert_eq!(reports[0].to_json().unwrap(), reports[1].to_json().unwrap());
    }

    #[test]
    fn evaluate_views_scores_a_real_pipeline() {
        let pipeline = tiny_pipeline(false);
        let views = fake_views(1);
        let mut opts = EvalOptions::new("toy", "backbone", "cfg");
        opts.time_renders = true;
        let (report, renders) = evaluate_views(&pipeline, &views, &opts).unwrap();
        assert_eq!(renders.len(), 1);
        assert!(report.render_seconds.unwrap() > 0.0);
        assert!(report.mean_psnr_db.is_finite());
        assert_eq!(report.model_bytes.sr, 0);
    }

    #[test]
    fn table_formatting_is_deterministic() {
        assert_eq!(
            render_table(&[]),
            "scene  method  psnr_db  ssim  perceptual  render_s  size_mb\n"
        );
        let report = EvalReport {
            scene: "toy".into(),
            method: "FT-RandPatch".into(),
            config_fingerprint: "x".into(),
            view_names: vec!["v".into()],
            psnr_db: vec![31.4159],
            ssim: vec![0.93215],
            mean_psnr_db: 31.4159,
            mean_ssim: 0.93215,
            perceptual: PerceptualScore::Unavailable("not requested".into()),
            render_seconds: Some(0.1234),
            model_bytes: ModelBytes { field: 1_200_000, sr: 34_000, total: 1_234_000 },
        };
        let table = render_table(&[report.clone()]);
        assert!(table.contains("31.42"), "{table}");
        assert!(table.contains("0.9322"), "{table}");
        assert!(table.contains("0.123"), "{table}");
        assert!(table.contains("1.23"), "{table}");
        assert!(table.contains("--"), "{table}");
        assert_eq!(table, render_table(&[report]));
    }
}
