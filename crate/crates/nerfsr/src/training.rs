//! Training orchestration: low-resolution warm-up of the backbone,
//! end-to-end patch optimization of the composed field + upscaler pipeline
//! under a masked patch MSE, and the training-strategy matrix including
//! distillation from a high-resolution teacher.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix4, Rotation3, UnitQuaternion};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SceneDataset, View};
use crate::error::{Error, Result};
use crate::evaluation::{psnr, RenderPipeline, Upscaler, PSNR_SENTINEL_DB};
use crate::field::{FieldGrads, RadianceField};
use crate::geometry::{downscale_camera, generate_rays, ndc_warp, CameraModel};
use crate::io::{archive::Archive, png};
use crate::renderer::{render_rays, render_rays_backward, RenderConfig};
use crate::rng::{self, phase};
use crate::sampling::{
    augment_pair, grid_patches, make_patch_pair, random_patch, AugmentParams, PatchPair,
};
use crate::sr::resize::{bilinear_resize_backward, bilinear_upscale};
use crate::sr::{SrGrads, SrNetwork};

// ---------------------------------------------------------------------------
// Strategies.
// ---------------------------------------------------------------------------

/// The training-strategy matrix. The strategy fully determines which
/// parameter groups receive gradients and which sampler draws patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Field only; the upscaler is fixed bilinear interpolation.
    Bilinear,
    /// Field trains; a super-resolution head loaded from disk stays frozen.
    Pretrained,
    /// Field and head both train from random initialization (no warm-up).
    Scratch,
    /// Warm-started field and head, grid patch sampling.
    FtGridPatch,
    /// Warm-started field and head, random patch sampling.
    FtRandPatch,
    /// Grid sampling over real plus teacher-rendered pseudo images.
    Distillation,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Bilinear,
        Strategy::Pretrained,
        Strategy::Scratch,
        Strategy::FtGridPatch,
        Strategy::FtRandPatch,
        Strategy::Distillation,
    ];

    /// Row label used in result tables.
    pub fn table_name(&self) -> &'static str {
        match self {
            Strategy::Bilinear => "Bilinear",
            Strategy::Pretrained => "Pretrained",
            Strategy::Scratch => "Scratch",
            Strategy::FtGridPatch => "FT-GridPatch",
            Strategy::FtRandPatch => "FT-RandPatch",
            Strategy::Distillation => "Distillation",
        }
    }

    /// Whether the super-resolution head's parameters are in the optimizer.
    pub fn trains_sr(&self) -> bool {
        !matches!(self, Strategy::Bilinear | Strategy::Pretrained)
    }

    /// Whether the pipeline carries a learned head at all.
    pub fn uses_network_sr(&self) -> bool {
        !matches!(self, Strategy::Bilinear)
    }

    /// Random patch origins (otherwise shuffled grid patches, cycled).
    pub fn uses_random_patches(&self) -> bool {
        matches!(self, Strategy::FtRandPatch)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.table_name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        for strategy in Strategy::ALL {
            let canon: String =
                strategy.table_name().chars().filter(|c| *c != '-').collect::<String>().to_lowercase();
            if key == canon {
                return Ok(strategy);
            }
        }
        Err(Error::Config(format!(
            "unknown strategy {s:?}; expected one of {}",
            Strategy::ALL.map(|v| v.table_name()).join(", ")
        )))
    }
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

/// Adaptive-moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { beta1: 0.9, beta2: 0.99, epsilon: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily, so the set of tracked names is exactly the set of arrays
/// that ever received an update — frozen groups never appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Names of parameter arrays with moment buffers, sorted.
    pub fn tracked(&self) -> Vec<&str> {
        self.moments.keys().map(|s| s.as_str()).collect()
    }

    /// Starts one optimizer step (shared bias-correction counter for every
    /// array updated until the next call).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn apply(
        &mut self,
        config: &OptimConfig,
        lr: f64,
        name: &str,
        param: &mut [f64],
        grad: &[f64],
    ) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape(format!(
                "{name}: parameter has {} values, gradient {}",
                param.len(),
                grad.len()
            )));
        }
        if self.step == 0 {
            return Err(Error::InvalidArgument("call begin_step before apply".into()));
        }
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        if m.len() != param.len() {
            return Err(Error::Shape(format!(
                "{name}: moment buffer has {} values, parameter {}",
                m.len(),
                param.len()
            )));
        }
        let (b1, b2) = (config.beta1, config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..param.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        Ok(())
    }

    /// Drops all moments and the step counter (phase boundaries, grid
    /// upsampling).
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }
}

// ---------------------------------------------------------------------------
// Patch loss.
// ---------------------------------------------------------------------------

/// Upscaler role in the loss: a training head accumulates gradients, a
/// frozen head only passes them through to the field, and the bilinear
/// baseline backpropagates through fixed interpolation.
#[derive(Debug, Clone, Copy)]
pub enum SrMode<'a> {
    Network(&'a SrNetwork),
    Frozen(&'a SrNetwork),
    Bilinear,
}

/// Value and gradients of the masked patch MSE.
#[derive(Debug)]
pub struct PatchLoss {
    pub loss: f64,
    /// [P, P, 3] upscaled prediction.
    pub prediction: Array3<f64>,
    pub field_grads: Option<FieldGrads>,
    /// Present only for [`SrMode::Network`].
    pub sr_grads: Option<SrGrads>,
}

/// Renders the pair's LR rays, upscales, and scores against the HR target:
/// mean over valid pixels and channels of the squared error. Gradients flow
/// to the field and (in `Network` mode) the head. `ndc_camera`, when given,
/// warps the patch rays with the LR camera's intrinsics before marching.
pub fn compute_patch_loss(
    field: &RadianceField,
    sr: SrMode<'_>,
    pair: &PatchPair,
    render: &RenderConfig,
    ndc_camera: Option<&CameraModel>,
    want_grads: bool,
) -> Result<PatchLoss> {
    let lr_side = pair.lr_rays.height();
    let ratio = pair.spec.ratio as usize;
    let hr_side = lr_side * ratio;
    if pair.hr_target.dim() != (hr_side, hr_side, 3) {
        return Err(Error::Shape(format!(
            "patch pair inconsistent: {lr_side} LR rays at ratio {ratio} vs HR target {:?}",
            pair.hr_target.dim()
        )));
    }
    let warped;
    let rays = match ndc_camera {
        Some(camera) => {
            warped = ndc_warp(&pair.lr_rays, camera, camera.near);
            &warped
        }
        None => &pair.lr_rays,
    };
    let (o, d) = rays.flat();
    let rendered =
        render_rays(field, o, d, rays.near, rays.far, render, 0, want_grads)?;
    let mut lr_rgb = Array3::zeros((lr_side, lr_side, 3));
    for row in 0..lr_side * lr_side {
        let (y, x) = (row / lr_side, row % lr_side);
        for c in 0..3 {
            lr_rgb[[y, x, c]] = rendered.rgb[[row, c]];
        }
    }

    let mut sr_cache = None;
    let prediction = match sr {
        SrMode::Network(net) | SrMode::Frozen(net) => {
            if net.ratio() as usize != ratio {
                return Err(Error::Shape(format!(
                    "head upscales x{} but the patch pair was built at x{ratio}",
                    net.ratio()
                )));
            }
            if want_grads {
                let (out, cache) = net.upscale_with_cache(&lr_rgb)?;
                sr_cache = Some(cache);
                out
            } else {
                net.upscale(&lr_rgb)?
            }
        }
        SrMode::Bilinear => bilinear_upscale(&lr_rgb, ratio as u32)?,
    };

    let n_valid = pair.mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::InvalidArgument("patch pair has no valid pixels".into()));
    }
    let denom = (n_valid * 3) as f64;
    let mut loss = 0.0;
    for y in 0..hr_side {
        for x in 0..hr_side {
            if pair.mask[[y, x]] {
                for c in 0..3 {
                    let r = prediction[[y, x, c]] - pair.hr_target[[y, x, c]];
                    loss += r * r;
                }
            }
        }
    }
    loss /= denom;
    if !loss.is_finite() {
        return Err(Error::Diverged { iter: 0, loss });
    }
    if !want_grads {
        return Ok(PatchLoss { loss, prediction, field_grads: None, sr_grads: None });
    }

    let mut d_pred = Array3::zeros((hr_side, hr_side, 3));
    for y in 0..hr_side {
        for x in 0..hr_side {
            if pair.mask[[y, x]] {
                for c in 0..3 {
                    d_pred[[y, x, c]] =
                        2.0 * (prediction[[y, x, c]] - pair.hr_target[[y, x, c]]) / denom;
                }
            }
        }
    }
    let mut sr_grads = None;
    let d_lr = match sr {
        SrMode::Network(net) => {
            let mut grads = SrGrads::zeros_like(net);
            let d_lr = net.upscale_backward(sr_cache.as_ref().expect("cached"), &d_pred, &mut grads)?;
            sr_grads = Some(grads);
            d_lr
        }
        SrMode::Frozen(net) => {
            let mut scratch = SrGrads::zeros_like(net);
            net.upscale_backward(sr_cache.as_ref().expect("cached"), &d_pred, &mut scratch)?
        }
        SrMode::Bilinear => bilinear_resize_backward(&d_pred, lr_side, lr_side)?,
    };
    let mut d_rgb = Array2::zeros((lr_side * lr_side, 3));
    for row in 0..lr_side * lr_side {
        let (y, x) = (row / lr_side, row % lr_side);
        for c in 0..3 {
            d_rgb[[row, c]] = d_lr[[y, x, c]];
        }
    }
    let mut field_grads = FieldGrads::zeros_like(field);
    let cache = rendered.cache.as_ref().expect("requested with want_cache");
    render_rays_backward(field, cache, d_rgb.view(), &mut field_grads);
    Ok(PatchLoss { loss, prediction, field_grads: Some(field_grads), sr_grads })
}

// ---------------------------------------------------------------------------
// Warm-up.
// ---------------------------------------------------------------------------

/// Backbone warm-up schedule: stochastic per-ray batches against LR targets
/// with exponential learning-rate decay and scheduled grid upsampling (each
/// upsample resets the optimizer and restarts the decay).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub iters: usize,
    pub batch_size: usize,
    /// Initial learning rate for the plane/line grid factors.
    pub lr_grid: f64,
    /// Initial learning rate for mixing matrices and MLP parameters.
    pub lr_network: f64,
    /// lr decays exponentially to `lr * lr_final_factor` over the phase.
    pub lr_final_factor: f64,
    /// (iteration, new grid resolution) events, strictly increasing.
    pub upsample_schedule: Vec<(usize, [usize; 3])>,
    pub optimizer: OptimConfig,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            iters: 5000,
            batch_size: 1024,
            lr_grid: 0.02,
            lr_network: 1e-3,
            lr_final_factor: 0.1,
            upsample_schedule: Vec::new(),
            optimizer: OptimConfig::default(),
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

/// Grid factors get the grid learning rate; mixing matrices and MLP/decoder
/// parameters get the network rate.
fn warmup_lr_group(name: &str) -> bool {
    name.contains(".plane") || name.contains(".line")
}

#[derive(Debug)]
pub struct WarmupOutcome {
    pub field: RadianceField,
    /// Per-iteration batch losses.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

struct RayBank {
    origins: Array2<f64>,
    directions: Array2<f64>,
    colors: Array2<f64>,
    near: f64,
    far: f64,
}

fn collect_rays(dataset: &SceneDataset) -> Result<RayBank> {
    if dataset.train.is_empty() {
        return Err(Error::Dataset("no training views".into()));
    }
    let mut origins = Vec::new();
    let mut directions = Vec::new();
    let mut colors = Vec::new();
    let mut bounds: Option<(f64, f64)> = None;
    for view in &dataset.train {
        let mut rays = generate_rays(&view.camera, None)?;
        if dataset.ndc {
            rays = ndc_warp(&rays, &view.camera, view.camera.near);
        }
        match bounds {
            None => bounds = Some((rays.near, rays.far)),
            Some(b) => {
                if b != (rays.near, rays.far) {
                    return Err(Error::Dataset(
                        "training views disagree on near/far bounds".into(),
                    ));
                }
            }
        }
        origins.extend(rays.origins.iter().copied());
        directions.extend(rays.directions.iter().copied());
        colors.extend(view.image.iter().copied());
    }
    let n = origins.len() / 3;
    let (near, far) = bounds.expect("nonempty");
    Ok(RayBank {
        origins: Array2::from_shape_vec((n, 3), origins).expect("sized"),
        directions: Array2::from_shape_vec((n, 3), directions).expect("sized"),
        colors: Array2::from_shape_vec((n, 3), colors).expect("sized"),
        near,
        far,
    })
}

/// Warms up the field against the LR dataset with per-ray batches (standard
/// backbone batching, not patches). `lr_dataset` must already be at the
/// render resolution (downsample by the target ratio first). Returns the
/// warmed field and the per-iteration loss curve; aborts with a divergence
/// error (after dumping state to `dump_dir`, when given) if the loss leaves
/// the finite range.
pub fn warmup_backbone(
    field: RadianceField,
    lr_dataset: &SceneDataset,
    config: &WarmupConfig,
    dump_dir: Option<&Path>,
) -> Result<WarmupOutcome> {
    if config.iters == 0 {
        return Ok(WarmupOutcome { field, losses: Vec::new(), seconds: 0.0 });
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("warmup batch_size must be positive".into()));
    }
    for w in config.upsample_schedule.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::Config("upsample schedule must be strictly increasing".into()));
        }
    }
    let start = Instant::now();
    let bank = collect_rays(lr_dataset)?;
    let n_rays = bank.origins.shape()[0];
    let mut field = field;
    let mut adam = AdamState::new();
    let mut losses = Vec::with_capacity(config.iters);
    let mut decay_anchor = 0usize;

    for iter in 0..config.iters {
        if let Some(&(_, res)) =
            config.upsample_schedule.iter().find(|(at, _)| *at == iter)
        {
            field = field.upsample_grids(res)?;
            adam.reset();
            decay_anchor = iter;
        }

        let mut batch_rng = rng::stream(config.seed, &[phase::WARMUP_BATCH, iter as u64]);
        let mut o = Array2::zeros((config.batch_size, 3));
        let mut d = Array2::zeros((config.batch_size, 3));
        let mut target = Array2::zeros((config.batch_size, 3));
        for b in 0..config.batch_size {
            let idx = batch_rng.gen_range(0..n_rays);
            for c in 0..3 {
                o[[b, c]] = bank.origins[[idx, c]];
                d[[b, c]] = bank.directions[[idx, c]];
                target[[b, c]] = bank.colors[[idx, c]];
            }
        }

        let mut render = config.render.clone();
        render.seed = rng::derive_seed(config.seed, &[phase::STRATIFIED, iter as u64]);
        let out = render_rays(&field, o.view(), d.view(), bank.near, bank.far, &render, 0, true)?;

        let denom = (config.batch_size * 3) as f64;
        let mut loss = 0.0;
        let mut d_rgb = Array2::zeros((config.batch_size, 3));
        for b in 0..config.batch_size {
            for c in 0..3 {
                let r = out.rgb[[b, c]] - target[[b, c]];
                loss += r * r;
                d_rgb[[b, c]] = 2.0 * r / denom;
            }
        }
        loss /= denom;
        if !loss.is_finite() {
            if let Some(dir) = dump_dir {
                let _ = std::fs::create_dir_all(dir);
                let _ = field.to_archive().and_then(|a| a.write(&dir.join("diverged_field.nsr")));
            }
            return Err(Error::Diverged { iter: iter as u64, loss });
        }
        losses.push(loss);

        let mut grads = FieldGrads::zeros_like(&field);
        render_rays_backward(&field, out.cache.as_ref().expect("cached"), d_rgb.view(), &mut grads);

        let span = (config.iters - decay_anchor).max(1) as f64;
        let decay = config.lr_final_factor.powf((iter - decay_anchor) as f64 / span);
        adam.begin_step();
        let grad_slices = grads.params();
        for ((name, param), (gname, grad)) in field.params_mut().into_iter().zip(grad_slices) {
            debug_assert_eq!(name, gname);
            let base = if warmup_lr_group(&name) { config.lr_grid } else { config.lr_network };
            adam.apply(&config.optimizer, base * decay, &name, param, grad)?;
        }
    }
    Ok(WarmupOutcome { field, losses, seconds: start.elapsed().as_secs_f64() })
}

// ---------------------------------------------------------------------------
// Train state and checkpoints.
// ---------------------------------------------------------------------------

/// Wall-clock ledger per training phase, in seconds. Kept out of checkpoint
/// archives so identical-seed runs produce bit-identical checkpoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseClock {
    pub warmup_seconds: f64,
    /// Teacher pseudo-image generation (distillation only).
    pub pseudo_seconds: f64,
    pub end_to_end_seconds: f64,
}

impl PhaseClock {
    pub fn total(&self) -> f64 {
        self.warmup_seconds + self.pseudo_seconds + self.end_to_end_seconds
    }
}

/// Mutable state of an end-to-end training run. Checkpoints round-trip
/// bitwise (minus the wall-clock ledger); identical seeds and devices yield
/// identical states at every epoch boundary.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub field: RadianceField,
    pub sr: Option<SrNetwork>,
    pub optimizer: AdamState,
    /// Completed end-to-end epochs.
    pub epoch: usize,
    /// Total optimizer steps taken in the end-to-end phase.
    pub iteration: u64,
    pub seed: u64,
    pub strategy: Strategy,
    /// Per-iteration losses across the whole run.
    pub loss_history: Vec<f64>,
    /// Best held-out validation PSNR seen at a checkpoint, with its epoch.
    pub best_val: Option<(usize, f64)>,
    pub wall_clock: PhaseClock,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    iteration: u64,
    seed: u64,
    strategy: Strategy,
    adam_step: u64,
    best_val: Option<(usize, f64)>,
    field: serde_json::Value,
    sr: Option<serde_json::Value>,
}

impl TrainState {
    pub fn new(field: RadianceField, sr: Option<SrNetwork>, strategy: Strategy, seed: u64) -> Self {
        TrainState {
            field,
            sr,
            optimizer: AdamState::new(),
            epoch: 0,
            iteration: 0,
            seed,
            strategy,
            loss_history: Vec::new(),
            best_val: None,
            wall_clock: PhaseClock::default(),
        }
    }

    /// Frozen snapshot for evaluation. The Bilinear strategy evaluates with
    /// fixed bilinear upscaling at the given ratio; strategies with a head
    /// use it; `ratio` 1 renders the full frame directly.
    pub fn pipeline(&self, ratio: usize, render: RenderConfig, ndc: bool) -> RenderPipeline {
        let upscaler = match &self.sr {
            Some(sr) => Upscaler::Network(sr.clone()),
            None if ratio > 1 => Upscaler::Bilinear(ratio),
            None => Upscaler::None,
        };
        RenderPipeline { field: self.field.clone(), upscaler, config: render, ndc }
    }

    /// Serializes everything that defines the run state — parameters,
    /// optimizer moments, counters, loss history — except wall-clock times.
    pub fn to_archive(&self) -> Result<Archive> {
        let field_archive = self.field.to_archive()?;
        let sr_archive = self.sr.as_ref().map(|s| s.to_archive()).transpose()?;
        let meta = CheckpointMeta {
            epoch: self.epoch,
            iteration: self.iteration,
            seed: self.seed,
            strategy: self.strategy,
            adam_step: self.optimizer.step,
            best_val: self.best_val,
            field: field_archive.meta.clone(),
            sr: sr_archive.as_ref().map(|a| a.meta.clone()),
        };
        let mut out = Archive::with_meta("checkpoint", &meta)?;
        for name in field_archive.names().map(String::from).collect::<Vec<_>>() {
            let (shape, data) = field_archive.get(&name).expect("listed");
            out.push(format!("field.{name}"), shape, data.to_vec());
        }
        if let Some(sa) = &sr_archive {
            for name in sa.names().map(String::from).collect::<Vec<_>>() {
                let (shape, data) = sa.get(&name).expect("listed");
                out.push(format!("sr.{name}"), shape, data.to_vec());
            }
        }
        for (name, (m, v)) in &self.optimizer.moments {
            out.push(format!("adam.m.{name}"), &[m.len()], m.clone());
            out.push(format!("adam.v.{name}"), &[v.len()], v.clone());
        }
        out.push("loss_history", &[self.loss_history.len()], self.loss_history.clone());
        Ok(out)
    }

    pub fn from_archive(archive: &Archive) -> Result<TrainState> {
        if archive.kind != "checkpoint" {
            return Err(Error::Config(format!(
                "expected a checkpoint archive, found kind {:?}",
                archive.kind
            )));
        }
        let meta: CheckpointMeta = archive.meta_as()?;
        let mut field_archive = Archive::new("field");
        field_archive.meta = meta.field.clone();
        let mut sr_archive = meta.sr.as_ref().map(|m| {
            let mut a = Archive::new("sr");
            a.meta = m.clone();
            a
        });
        let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut loss_history = Vec::new();
        for name in archive.names().map(String::from).collect::<Vec<_>>() {
            let (shape, data) = archive.get(&name).expect("listed");
            if let Some(rest) = name.strip_prefix("field.") {
                field_archive.push(rest.to_string(), shape, data.to_vec());
            } else if let Some(rest) = name.strip_prefix("sr.") {
                match sr_archive.as_mut() {
                    Some(a) => a.push(rest.to_string(), shape, data.to_vec()),
                    None => {
                        return Err(Error::Config(format!(
                            "checkpoint has array {name} but no head metadata"
                        )))
                    }
                }
            } else if let Some(rest) = name.strip_prefix("adam.m.") {
                moments.entry(rest.to_string()).or_default().0 = data.to_vec();
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                moments.entry(rest.to_string()).or_default().1 = data.to_vec();
            } else if name == "loss_history" {
                loss_history = data.to_vec();
            } else {
                return Err(Error::Config(format!("unrecognized checkpoint array {name}")));
            }
        }
        for (name, (m, v)) in &moments {
            if m.len() != v.len() {
                return Err(Error::Config(format!(
                    "moment buffers for {name} disagree: {} vs {}",
                    m.len(),
                    v.len()
                )));
            }
        }
        Ok(TrainState {
            field: RadianceField::from_archive(&field_archive)?,
            sr: sr_archive.as_ref().map(SrNetwork::from_archive).transpose()?,
            optimizer: AdamState { step: meta.adam_step, moments },
            epoch: meta.epoch,
            iteration: meta.iteration,
            seed: meta.seed,
            strategy: meta.strategy,
            loss_history,
            best_val: meta.best_val,
            wall_clock: PhaseClock::default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<TrainState> {
        TrainState::from_archive(&Archive::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// End-to-end training.
// ---------------------------------------------------------------------------

/// Standard patch side per upscaling ratio (256 at x2, 128 at x4).
pub fn default_patch_size(ratio: usize) -> usize {
    (512 / ratio.max(1)).max(8)
}

/// Full end-to-end protocol configuration. Serializable as the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub ratio: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub optimizer: OptimConfig,
    pub seed: u64,
    pub device: String,
    /// Patch-level augmentation (rotation/flip); `None` disables.
    pub augment: Option<AugmentParams>,
    /// Checkpoint (and validation) cadence in epochs.
    pub checkpoint_every: usize,
    pub render: RenderConfig,
    /// Residual blocks in a freshly built head.
    pub sr_blocks: usize,
    /// Feature channels in a freshly built head.
    pub sr_channels: usize,
    /// Teacher-rendered pseudo images for the Distillation strategy.
    pub distill_images: usize,
    /// Frozen head weights for the Pretrained strategy.
    pub pretrained_sr: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::FtRandPatch,
            ratio: 2,
            epochs: 150,
            learning_rate: 1e-4,
            patch_size: default_patch_size(2),
            optimizer: OptimConfig::default(),
            seed: 0,
            device: "cpu".into(),
            augment: None,
            checkpoint_every: 10,
            render: RenderConfig::default(),
            sr_blocks: 16,
            sr_channels: 64,
            distill_images: 1000,
            pretrained_sr: None,
        }
    }
}

/// One line of the training log (line-delimited JSON records).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Mean RGB over a set of views (the head's mean-shift constant).
pub fn dataset_mean_rgb(views: &[View]) -> [f64; 3] {
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for view in views {
        let (h, w, _) = view.image.dim();
        count += h * w;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    sums[c] += view.image[[y, x, c]];
                }
            }
        }
    }
    if count == 0 {
        return [0.0; 3];
    }
    sums.map(|s| s / count as f64)
}

/// Builds the initial end-to-end state for a strategy around a (warmed or
/// fresh) field: a new head for training strategies, a frozen pretrained
/// head for `Pretrained`, none for `Bilinear`.
pub fn init_end_to_end_state(
    field: RadianceField,
    dataset_hr: &SceneDataset,
    config: &TrainConfig,
) -> Result<TrainState> {
    let sr = if config.strategy.uses_network_sr() {
        let mean = dataset_mean_rgb(&dataset_hr.train);
        let mut net = crate::sr::build_sr_network(
            config.ratio as u32,
            config.sr_blocks,
            config.sr_channels,
            mean,
            config.seed,
        )?;
        if config.strategy == Strategy::Pretrained {
            let path = config.pretrained_sr.as_ref().ok_or_else(|| {
                Error::Missing("the Pretrained strategy needs pretrained_sr weights".into())
            })?;
            crate::sr::load_pretrained(&mut net, path, true)?;
        }
        Some(net)
    } else {
        None
    };
    Ok(TrainState::new(field, sr, config.strategy, config.seed))
}

/// The grid patch drawn for (image, epoch): grid patches in a per-cycle
/// shuffled order, cycling when exhausted. Stateless in the epoch counter,
/// so resumed runs draw identical sequences.
fn grid_cycled_spec(
    grid: &[crate::sampling::PatchSpec],
    seed: u64,
    image_index: u64,
    epoch: usize,
) -> crate::sampling::PatchSpec {
    let n = grid.len();
    let cycle = (epoch / n) as u64;
    let pos = epoch % n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[phase::PATCH, image_index, cycle]));
    grid[order[pos]].clone()
}

fn held_out_view(dataset: &SceneDataset) -> Option<&View> {
    dataset.val.first().or_else(|| dataset.test.first())
}

/// Runs the end-to-end phase from `state.epoch` to `config.epochs`: per
/// epoch one pass over the training images in a seeded shuffled order, one
/// patch per image, one optimizer step per patch. Checkpoints (and held-out
/// validation for the best-PSNR snapshot) happen every `checkpoint_every`
/// epochs into `out_dir` when given. Divergence aborts with a state dump.
pub fn train_end_to_end(
    mut state: TrainState,
    dataset_hr: &SceneDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    if dataset_hr.train.is_empty() {
        return Err(Error::Dataset("no training views".into()));
    }
    if state.strategy != config.strategy {
        return Err(Error::Config(format!(
            "state was initialized for {} but the config says {}",
            state.strategy, config.strategy
        )));
    }
    match (&state.sr, config.strategy.uses_network_sr()) {
        (None, true) => {
            return Err(Error::Config(format!(
                "strategy {} needs a head; build the state with init_end_to_end_state",
                config.strategy
            )))
        }
        (Some(_), false) => {
            return Err(Error::Config(format!(
                "strategy {} uses fixed bilinear upscaling but the state carries a head",
                config.strategy
            )))
        }
        _ => {}
    }
    if let Some(sr) = &state.sr {
        if sr.ratio() as usize != config.ratio {
            return Err(Error::Config(format!(
                "head upscales x{} but the config trains at x{}",
                sr.ratio(),
                config.ratio
            )));
        }
    }
    if config.checkpoint_every == 0 {
        return Err(Error::Config("checkpoint_every must be positive".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
            let path = dir.join("train_log.jsonl");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(path, e))?;
            Some(std::io::BufWriter::new(file))
        }
        None => None,
    };

    let (h, w, _) = dataset_hr.train[0].image.dim();
    let grid = grid_patches(h, w, config.patch_size, config.ratio as u32)?;
    let lr_cameras: Option<Vec<CameraModel>> = if dataset_hr.ndc {
        Some(
            dataset_hr
                .train
                .iter()
                .map(|v| downscale_camera(&v.camera, config.ratio))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let n_train = dataset_hr.train.len();
    for epoch in state.epoch..config.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng::stream(state.seed, &[phase::EPOCH_ORDER, epoch as u64]));

        for &img in &order {
            let view = &dataset_hr.train[img];
            let spec = if config.strategy.uses_random_patches() {
                random_patch(
                    h,
                    w,
                    config.patch_size,
                    config.ratio as u32,
                    &mut rng::stream(state.seed, &[phase::PATCH, epoch as u64, img as u64]),
                )?
            } else {
                grid_cycled_spec(&grid, state.seed, img as u64, epoch)
            };
            let mut pair = make_patch_pair(&view.image, &view.camera, &spec)?;
            if let Some(params) = &config.augment {
                pair = augment_pair(
                    &pair,
                    &view.camera,
                    params,
                    &mut rng::stream(state.seed, &[phase::AUGMENT, epoch as u64, img as u64]),
                )?;
            }
            let mut render = config.render.clone();
            render.seed =
                rng::derive_seed(state.seed, &[phase::STRATIFIED, epoch as u64, img as u64]);
            let mode = match (&state.sr, config.strategy) {
                (None, _) => SrMode::Bilinear,
                (Some(sr), Strategy::Pretrained) => SrMode::Frozen(sr),
                (Some(sr), _) => SrMode::Network(sr),
            };
            let ndc_cam = lr_cameras.as_ref().map(|cams| &cams[img]);
            let result = compute_patch_loss(&state.field, mode, &pair, &render, ndc_cam, true);
            let out = match result {
                Err(Error::Diverged { loss, .. }) => {
                    if let Some(dir) = out_dir {
                        let _ = state.save(&dir.join("diverged.nsr"));
                    }
                    return Err(Error::Diverged { iter: state.iteration, loss });
                }
                other => other?,
            };

            state.loss_history.push(out.loss);
            state.iteration += 1;
            if let Some(log) = log.as_mut() {
                use std::io::Write;
                let record = TrainLogRecord {
                    epoch,
                    iter: state.iteration,
                    loss: out.loss,
                    lr: config.learning_rate,
                    wall_seconds: state.wall_clock.end_to_end_seconds
                        + t0.elapsed().as_secs_f64(),
                };
                writeln!(log, "{}", serde_json::to_string(&record)?)
                    .map_err(|e| Error::io(PathBuf::from("train_log.jsonl"), e))?;
            }
            state.optimizer.begin_step();
            let field_grads = out.field_grads.expect("gradients requested");
            {
                let grad_slices = field_grads.params();
                for ((name, param), (gname, grad)) in
                    state.field.params_mut().into_iter().zip(grad_slices)
                {
                    debug_assert_eq!(name, gname);
                    state.optimizer.apply(
                        &config.optimizer,
                        config.learning_rate,
                        &name,
                        param,
                        grad,
                    )?;
                }
            }
            if config.strategy.trains_sr() {
                let sr_grads = out.sr_grads.expect("training head gradients");
                let grad_slices = sr_grads.params();
                let sr = state.sr.as_mut().expect("head present");
                for ((name, param), (gname, grad)) in
                    sr.params_mut().into_iter().zip(grad_slices)
                {
                    debug_assert_eq!(name, gname);
                    state.optimizer.apply(
                        &config.optimizer,
                        config.learning_rate,
                        &format!("sr.{name}"),
                        param,
                        grad,
                    )?;
                }
            }
        }

        state.epoch = epoch + 1;
        state.wall_clock.end_to_end_seconds += t0.elapsed().as_secs_f64();
        if let Some(log) = log.as_mut() {
            use std::io::Write;
            log.flush().map_err(|e| Error::io(PathBuf::from("train_log.jsonl"), e))?;
        }

        let boundary = state.epoch % config.checkpoint_every == 0 || state.epoch == config.epochs;
        if boundary {
            if let Some(view) = held_out_view(dataset_hr) {
                let pipeline =
                    state.pipeline(config.ratio, eval_render_config(&config.render), dataset_hr.ndc);
                let rendered = pipeline.render_view(&view.camera)?;
                let clamped = rendered.mapv(|v| v.clamp(0.0, 1.0));
                let db = psnr(&clamped, &view.image, 1.0)?.min(PSNR_SENTINEL_DB);
                let improved = state.best_val.map(|(_, best)| db > best).unwrap_or(true);
                if improved {
                    state.best_val = Some((state.epoch, db));
                    if let Some(dir) = out_dir {
                        state.save(&dir.join("best.nsr"))?;
                    }
                }
            }
            if let Some(dir) = out_dir {
                state.save(&dir.join(format!("checkpoint_epoch_{:04}.nsr", state.epoch)))?;
                state.save(&dir.join("latest.nsr"))?;
            }
        }
    }
    Ok(state)
}

/// Deterministic render settings for validation snapshots: same sampling
/// counts as training but unjittered.
fn eval_render_config(render: &RenderConfig) -> RenderConfig {
    RenderConfig { stratified: false, seed: 0, ..render.clone() }
}

// ---------------------------------------------------------------------------
// Distillation.
// ---------------------------------------------------------------------------

/// Interpolates two camera-to-world poses: rotations slerp on the quaternion
/// manifold, translations lerp.
fn interpolate_pose(a: &Matrix4<f64>, b: &Matrix4<f64>, t: f64) -> Matrix4<f64> {
    let rot = |m: &Matrix4<f64>| {
        Rotation3::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into_owned())
    };
    let qa = UnitQuaternion::from_rotation_matrix(&rot(a));
    let qb = UnitQuaternion::from_rotation_matrix(&rot(b));
    let q = qa.slerp(&qb, t);
    let ta = a.fixed_view::<3, 1>(0, 3);
    let tb = b.fixed_view::<3, 1>(0, 3);
    let tr = ta * (1.0 - t) + tb * t;
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(q.to_rotation_matrix().matrix());
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&tr);
    out
}

/// Renders `config.distill_images` pseudo ground-truth views with the HR
/// teacher at poses interpolated between random training-pose pairs, writes
/// them under `pseudo_dir`, and trains the student on the union of real and
/// pseudo images with grid patches. Teacher render time lands in the
/// `pseudo_seconds` ledger (it counts toward the method's training time).
pub fn distill(
    teacher: &RadianceField,
    mut state: TrainState,
    dataset_hr: &SceneDataset,
    config: &TrainConfig,
    pseudo_dir: &Path,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    if config.strategy != Strategy::Distillation {
        return Err(Error::Config(format!(
            "distill called with strategy {}",
            config.strategy
        )));
    }
    if dataset_hr.train.is_empty() {
        return Err(Error::Dataset("no training views".into()));
    }
    let t0 = Instant::now();
    std::fs::create_dir_all(pseudo_dir).map_err(|e| Error::io(pseudo_dir.to_path_buf(), e))?;
    let teacher_pipeline = RenderPipeline {
        field: teacher.clone(),
        upscaler: Upscaler::None,
        config: eval_render_config(&config.render),
        ndc: dataset_hr.ndc,
    };
    let mut pseudo_views = Vec::with_capacity(config.distill_images);
    let n_train = dataset_hr.train.len();
    for k in 0..config.distill_images {
        let mut rng = rng::stream(state.seed, &[phase::DISTILL_POSES, k as u64]);
        let i = rng.gen_range(0..n_train);
        let mut j = rng.gen_range(0..n_train);
        if n_train > 1 {
            while j == i {
                j = rng.gen_range(0..n_train);
            }
        }
        let t = rng.gen::<f64>();
        let pose =
            interpolate_pose(&dataset_hr.train[i].camera.pose, &dataset_hr.train[j].camera.pose, t);
        let camera = CameraModel { pose, ..dataset_hr.train[i].camera.clone() };
        let rendered = teacher_pipeline.render_view(&camera)?;
        let clamped = rendered.mapv(|v| v.clamp(0.0, 1.0));
        let path = pseudo_dir.join(format!("pseudo_{k:04}.png"));
        png::save_rgb(&path, &clamped)?;
        // Train against the stored artifact, not the float render, so a rerun
        // from disk is identical.
        let image = png::load_rgb(&path, dataset_hr.background)?;
        pseudo_views.push(View { name: format!("pseudo_{k:04}"), image, camera });
    }
    state.wall_clock.pseudo_seconds += t0.elapsed().as_secs_f64();

    let mut union = dataset_hr.clone();
    union.train.extend(pseudo_views);
    union.validate()?;
    train_end_to_end(state, &union, config, out_dir)
}
