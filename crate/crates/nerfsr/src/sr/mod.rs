//! Convolutional super-resolution head: residual blocks plus sub-pixel
//! upsampling for integer ratios 2, 4, and 8.
//!
//! The architecture is a compact residual upscaler: a head convolution lifts
//! RGB to `n_channels` features, a chain of `n_blocks` residual blocks
//! (conv-ReLU-conv, residual scaling 0.1, no normalization) feeds a closing
//! convolution with a global skip back to the head output, then one
//! conv + pixel-shuffle stage per x2 factor, and a tail convolution back to
//! RGB. A fixed RGB `mean_shift` is subtracted at the input and re-added at
//! the output. Padding is reflective everywhere, so constant inputs map to
//! constant outputs and the network is translation-equivariant away from
//! borders. Everything is f64 and hand-differentiated; [`SrNetwork::upscale_backward`]
//! propagates gradients to all parameters and back to the LR input so the
//! radiance field can train through the head.

pub mod layers;
pub mod resize;

pub use resize::{bilinear_resize, bilinear_resize_backward, bilinear_upscale};

use crate::io::archive::Archive;
use crate::{rng, Error, Result};
use layers::{pixel_shuffle2, pixel_unshuffle2, Conv2d, ConvGrads};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Residual-branch scaling applied before each block's skip addition.
pub const RESIDUAL_SCALE: f64 = 0.1;
/// Smallest supported input side, matching the receptive-field minimum.
pub const MIN_INPUT_SIDE: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SrMeta {
    ratio: u32,
    n_blocks: usize,
    n_channels: usize,
    mean_shift: [f64; 3],
}

/// Residual convolutional upscaler (see module docs for the layout).
#[derive(Debug, Clone)]
pub struct SrNetwork {
    ratio: u32,
    n_blocks: usize,
    n_channels: usize,
    mean_shift: [f64; 3],
    head: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    body_end: Conv2d,
    up: Vec<Conv2d>,
    tail: Conv2d,
}

/// Activations retained by [`SrNetwork::upscale_with_cache`] for the backward pass.
#[derive(Debug)]
pub struct SrCache {
    x_shifted: Array3<f64>,
    block_inputs: Vec<Array3<f64>>,
    block_hidden: Vec<Array3<f64>>,
    body_in: Array3<f64>,
    up_inputs: Vec<Array3<f64>>,
    tail_in: Array3<f64>,
}

/// Parameter gradients, mirroring the network's layer layout.
#[derive(Debug)]
pub struct SrGrads {
    pub head: ConvGrads,
    pub blocks: Vec<(ConvGrads, ConvGrads)>,
    pub body_end: ConvGrads,
    pub up: Vec<ConvGrads>,
    pub tail: ConvGrads,
}

/// Builds a randomly initialized network. `ratio` must be 2, 4, or 8; the
/// larger ratios stack log2(ratio) x2 sub-pixel stages.
pub fn build_sr_network(
    ratio: u32,
    n_blocks: usize,
    n_channels: usize,
    mean_shift: [f64; 3],
    seed: u64,
) -> Result<SrNetwork> {
    if !matches!(ratio, 2 | 4 | 8) {
        return Err(Error::InvalidArgument(format!(
            "unsupported upscaling ratio {ratio}; expected 2, 4, or 8"
        )));
    }
    if n_channels == 0 {
        return Err(Error::InvalidArgument("n_channels must be positive".into()));
    }
    let n_stages = ratio.trailing_zeros() as usize;
    let mut r = rng::stream(seed, &[rng::phase::SR_INIT]);
    let head = Conv2d::init(n_channels, 3, &mut r);
    let blocks = (0..n_blocks)
        .map(|_| {
            (
                Conv2d::init(n_channels, n_channels, &mut r),
                Conv2d::init(n_channels, n_channels, &mut r),
            )
        })
        .collect();
    let body_end = Conv2d::init(n_channels, n_channels, &mut r);
    // Phase-replicated sub-pixel init: at initialization the shuffle acts as
    // nearest-neighbor upsampling, so constant inputs stay constant instead
    // of picking up a 2-periodic pattern from four independent phases.
    let up = (0..n_stages)
        .map(|_| Conv2d::init_subpixel2(n_channels, n_channels, &mut r))
        .collect();
    let tail = Conv2d::init(3, n_channels, &mut r);
    Ok(SrNetwork { ratio, n_blocks, n_channels, mean_shift, head, blocks, body_end, up, tail })
}

impl SrNetwork {
    pub fn ratio(&self) -> u32 {
        self.ratio
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_upsampling_stages(&self) -> usize {
        self.up.len()
    }

    pub fn mean_shift(&self) -> [f64; 3] {
        self.mean_shift
    }

    pub fn set_mean_shift(&mut self, mean_shift: [f64; 3]) {
        self.mean_shift = mean_shift;
    }

    fn check_input(&self, image: &Array3<f64>) -> Result<()> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected an [H, W, 3] image, got [{h}, {w}, {c}]")));
        }
        if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
            return Err(Error::Shape(format!(
                "input {h}x{w} is below the {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE} minimum"
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite value in upscale input".into()));
        }
        Ok(())
    }

    fn shifted_input(&self, image: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = image.dim();
        Array3::from_shape_fn((3, h, w), |(c, y, x)| image[[y, x, c]] - self.mean_shift[c])
    }

    fn finish_output(&self, y: Array3<f64>) -> Array3<f64> {
        let (_, h, w) = y.dim();
        Array3::from_shape_fn((h, w, 3), |(yy, xx, c)| y[[c, yy, xx]] + self.mean_shift[c])
    }

    /// Upscales an `[H, W, 3]` image to `[r*H, r*W, 3]`. The output is not
    /// clamped; callers quantizing to pixels clamp at that point.
    pub fn upscale(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_input(image)?;
        let x = self.shifted_input(image);
        let h0 = self.head.forward(&x);
        let mut b = h0.clone();
        for (conv1, conv2) in &self.blocks {
            let hidden = conv1.forward(&b).mapv(|v| v.max(0.0));
            let residual = conv2.forward(&hidden);
            b.zip_mut_with(&residual, |acc, r| *acc += RESIDUAL_SCALE * r);
        }
        let mut hcur = self.body_end.forward(&b);
        hcur += &h0;
        for conv in &self.up {
            hcur = pixel_shuffle2(&conv.forward(&hcur));
        }
        Ok(self.finish_output(self.tail.forward(&hcur)))
    }

    /// Like [`Self::upscale`] but retains intermediate activations for
    /// [`Self::upscale_backward`].
    pub fn upscale_with_cache(&self, image: &Array3<f64>) -> Result<(Array3<f64>, SrCache)> {
        self.check_input(image)?;
        let x = self.shifted_input(image);
        let h0 = self.head.forward(&x);
        let mut block_inputs = Vec::with_capacity(self.n_blocks);
        let mut block_hidden = Vec::with_capacity(self.n_blocks);
        let mut b = h0.clone();
        for (conv1, conv2) in &self.blocks {
            let hidden = conv1.forward(&b).mapv(|v| v.max(0.0));
            let residual = conv2.forward(&hidden);
            block_inputs.push(b.clone());
            block_hidden.push(hidden);
            b.zip_mut_with(&residual, |acc, r| *acc += RESIDUAL_SCALE * r);
        }
        let body_in = b;
        let mut hcur = self.body_end.forward(&body_in);
        hcur += &h0;
        let mut up_inputs = Vec::with_capacity(self.up.len());
        for conv in &self.up {
            let shuffled = pixel_shuffle2(&conv.forward(&hcur));
            up_inputs.push(hcur);
            hcur = shuffled;
        }
        let tail_in = hcur;
        let out = self.finish_output(self.tail.forward(&tail_in));
        Ok((out, SrCache { x_shifted: x, block_inputs, block_hidden, body_in, up_inputs, tail_in }))
    }

    /// Backpropagates `d_output` (gradient of a scalar loss w.r.t. the HR
    /// output, `[rH, rW, 3]`) through the network. Parameter gradients are
    /// accumulated into `grads`; the return value is the gradient w.r.t. the
    /// LR input image (`[H, W, 3]`).
    pub fn upscale_backward(
        &self,
        cache: &SrCache,
        d_output: &Array3<f64>,
        grads: &mut SrGrads,
    ) -> Result<Array3<f64>> {
        let (h, w, c) = d_output.dim();
        let (tc, th, tw) = cache.tail_in.dim();
        if (h, w, c) != (th, tw, 3) || tc != self.n_channels {
            return Err(Error::Shape(format!(
                "output gradient [{h}, {w}, {c}] does not match cached forward [{th}, {tw}, 3]"
            )));
        }
        // The re-added mean is constant, so the HR gradient passes straight
        // into the tail convolution.
        let dy = Array3::from_shape_fn((3, h, w), |(ch, yy, xx)| d_output[[yy, xx, ch]]);
        let mut d = self.tail.backward(&cache.tail_in, &dy, &mut grads.tail);
        for (i, conv) in self.up.iter().enumerate().rev() {
            let d_conv_out = pixel_unshuffle2(&d);
            d = conv.backward(&cache.up_inputs[i], &d_conv_out, &mut grads.up[i]);
        }
        // d is now the gradient at body_end(body_in) + h0.
        let d_skip = d.clone();
        let mut d_b = self.body_end.backward(&cache.body_in, &d, &mut grads.body_end);
        for (i, (conv1, conv2)) in self.blocks.iter().enumerate().rev() {
            let d_residual = d_b.mapv(|v| v * RESIDUAL_SCALE);
            let (g1, g2) = &mut grads.blocks[i];
            let mut d_hidden = conv2.backward(&cache.block_hidden[i], &d_residual, g2);
            d_hidden.zip_mut_with(&cache.block_hidden[i], |g, h| {
                if *h <= 0.0 {
                    *g = 0.0;
                }
            });
            let d_in = conv1.backward(&cache.block_inputs[i], &d_hidden, g1);
            d_b += &d_in;
        }
        let d_h0 = d_b + &d_skip;
        let d_x = self.head.backward(&cache.x_shifted, &d_h0, &mut grads.head);
        let (_, ih, iw) = d_x.dim();
        Ok(Array3::from_shape_fn((ih, iw, 3), |(yy, xx, ch)| d_x[[ch, yy, xx]]))
    }

    fn for_each_layer<'a>(&'a self, f: &mut dyn FnMut(String, &'a Conv2d)) {
        f("head".into(), &self.head);
        for (i, (c1, c2)) in self.blocks.iter().enumerate() {
            f(format!("block{i}.conv1"), c1);
            f(format!("block{i}.conv2"), c2);
        }
        f("body_end".into(), &self.body_end);
        for (i, conv) in self.up.iter().enumerate() {
            f(format!("up{i}"), conv);
        }
        f("tail".into(), &self.tail);
    }

    fn for_each_layer_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Conv2d)) {
        f("head".into(), &mut self.head);
        for (i, (c1, c2)) in self.blocks.iter_mut().enumerate() {
            f(format!("block{i}.conv1"), c1);
            f(format!("block{i}.conv2"), c2);
        }
        f("body_end".into(), &mut self.body_end);
        for (i, conv) in self.up.iter_mut().enumerate() {
            f(format!("up{i}"), conv);
        }
        f("tail".into(), &mut self.tail);
    }

    /// Named parameter arrays in canonical order.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.for_each_layer(&mut |name, conv| {
            out.push((format!("{name}.weight"), conv.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), conv.bias.as_slice().expect("standard layout")));
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.for_each_layer_mut(&mut |name, conv| {
            out.push((
                format!("{name}.weight"),
                conv.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((format!("{name}.bias"), conv.bias.as_slice_mut().expect("standard layout")));
        });
        out
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.for_each_layer(&mut |name, conv| {
            out.push((format!("{name}.weight"), conv.weight.shape().to_vec()));
            out.push((format!("{name}.bias"), conv.bias.shape().to_vec()));
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, data)| data.len()).sum()
    }

    /// Serialized parameter footprint (f64 storage).
    pub fn size_bytes(&self) -> usize {
        self.param_count() * std::mem::size_of::<f64>()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let meta = SrMeta {
            ratio: self.ratio,
            n_blocks: self.n_blocks,
            n_channels: self.n_channels,
            mean_shift: self.mean_shift,
        };
        let mut a = Archive::with_meta("sr", &meta)?;
        let shapes = self.param_shapes();
        for ((name, data), (sname, shape)) in self.params().into_iter().zip(shapes) {
            debug_assert_eq!(name, sname);
            a.push(name, &shape, data.to_vec());
        }
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<SrNetwork> {
        if archive.kind != "sr" {
            return Err(Error::Missing(format!(
                "expected an 'sr' archive, got '{}'",
                archive.kind
            )));
        }
        let meta: SrMeta = archive.meta_as()?;
        let mut net =
            build_sr_network(meta.ratio, meta.n_blocks, meta.n_channels, meta.mean_shift, 0)?;
        for (name, values) in net.params_mut() {
            let (shape, data) = archive.require(&name)?;
            let n: usize = shape.iter().product();
            if n != values.len() {
                return Err(Error::Shape(format!(
                    "array {name}: archive has {n} elements, network expects {}",
                    values.len()
                )));
            }
            values.copy_from_slice(data);
        }
        Ok(net)
    }
}

impl SrGrads {
    pub fn zeros_like(net: &SrNetwork) -> Self {
        SrGrads {
            head: ConvGrads::zeros_like(&net.head),
            blocks: net
                .blocks
                .iter()
                .map(|(c1, c2)| (ConvGrads::zeros_like(c1), ConvGrads::zeros_like(c2)))
                .collect(),
            body_end: ConvGrads::zeros_like(&net.body_end),
            up: net.up.iter().map(ConvGrads::zeros_like).collect(),
            tail: ConvGrads::zeros_like(&net.tail),
        }
    }

    /// Gradient arrays in the same order and naming as [`SrNetwork::params`].
    pub fn params(&self) -> Vec<(String, &[f64])> {
        fn push<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, g: &'a ConvGrads) {
            out.push((format!("{name}.weight"), g.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), g.bias.as_slice().expect("standard layout")));
        }
        let mut out = Vec::new();
        push(&mut out, "head", &self.head);
        for (i, (g1, g2)) in self.blocks.iter().enumerate() {
            push(&mut out, &format!("block{i}.conv1"), g1);
            push(&mut out, &format!("block{i}.conv2"), g2);
        }
        push(&mut out, "body_end", &self.body_end);
        for (i, g) in self.up.iter().enumerate() {
            push(&mut out, &format!("up{i}"), g);
        }
        push(&mut out, "tail", &self.tail);
        out
    }
}

/// Replaces `net`'s parameters from a checkpoint archive. In strict mode the
/// checkpoint's array names must match the network's exactly; non-strict mode
/// loads the declared subset and leaves the rest (e.g. the tail of a
/// body-only checkpoint) at their current values. Shape mismatches are errors
/// in both modes, naming the first offending array.
pub fn load_pretrained(net: &mut SrNetwork, checkpoint_path: &Path, strict: bool) -> Result<()> {
    let archive = Archive::read(checkpoint_path)?;
    if archive.kind != "sr" {
        return Err(Error::archive(
            checkpoint_path,
            format!("expected an 'sr' checkpoint, got kind '{}'", archive.kind),
        ));
    }
    let expected = net.param_shapes();
    for (name, shape) in &expected {
        match archive.get(name) {
            Some((ashape, _)) => {
                if ashape != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "array {name}: checkpoint shape {ashape:?} does not match network shape {shape:?}"
                    )));
                }
            }
            None if strict => {
                return Err(Error::Missing(format!(
                    "strict load: checkpoint lacks array {name}"
                )));
            }
            None => {}
        }
    }
    if strict {
        for name in archive.names() {
            if !expected.iter().any(|(n, _)| n == name) {
                return Err(Error::Missing(format!(
                    "strict load: checkpoint array {name} has no counterpart in the network"
                )));
            }
        }
    }
    for (name, values) in net.params_mut() {
        if let Some((_, data)) = archive.get(&name) {
            values.copy_from_slice(data);
        }
    }
    Ok(())
}

/// Imports weights whose arrays use a foreign naming scheme. `table_path` is
/// a JSON object mapping this network's array names to the checkpoint's;
/// network arrays absent from the table keep their current values.
pub fn load_translated(
    net: &mut SrNetwork,
    checkpoint_path: &Path,
    table_path: &Path,
) -> Result<()> {
    let text = std::fs::read_to_string(table_path)
        .map_err(|e| Error::io(table_path.to_path_buf(), e))?;
    let table: BTreeMap<String, String> = serde_json::from_str(&text)?;
    let archive = Archive::read(checkpoint_path)?;
    let expected = net.param_shapes();
    for ours in table.keys() {
        if !expected.iter().any(|(n, _)| n == ours) {
            return Err(Error::InvalidArgument(format!(
                "translation table maps unknown array {ours}"
            )));
        }
    }
    for (name, shape) in &expected {
        if let Some(theirs) = table.get(name) {
            let (ashape, _) = archive.require(theirs)?;
            if ashape != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "array {name} (checkpoint {theirs}): shape {ashape:?} does not match network shape {shape:?}"
                )));
            }
        }
    }
    for (name, values) in net.params_mut() {
        if let Some(theirs) = table.get(&name) {
            let (_, data) = archive.require(theirs)?;
            values.copy_from_slice(data);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tiny_net(ratio: u32, seed: u64) -> SrNetwork {
        build_sr_network(ratio, 2, 6, [0.4, 0.45, 0.5], seed).unwrap()
    }

    #[test]
    fn parameter_count_matches_walk_enumeration() {
        let net = build_sr_network(2, 16, 64, [0.0; 3], 7).unwrap();
        let c = 64usize;
        let hand = (c * 3 * 9 + c)
            + 16 * 2 * (c * c * 9 + c)
            + (c * c * 9 + c)
            + (4 * c * c * 9 + 4 * c)
            + (3 * c * 9 + 3);
        let walk: usize = net
            .param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(net.param_count(), hand);
        assert_eq!(walk, hand);
        assert_eq!(net.size_bytes(), hand * 8);
    }

    #[test]
    fn stage_counts_follow_log2_ratio() {
        assert_eq!(tiny_net(2, 0).n_upsampling_stages(), 1);
        assert_eq!(tiny_net(4, 0).n_upsampling_stages(), 2);
        assert_eq!(tiny_net(8, 0).n_upsampling_stages(), 3);
    }

    #[test]
    fn unsupported_ratios_rejected() {
        for ratio in [0u32, 1, 3, 5, 16] {
            assert!(build_sr_network(ratio, 2, 8, [0.0; 3], 0).is_err(), "ratio {ratio}");
        }
    }

    #[test]
    fn zero_network_outputs_mean_shift() {
        let mean = [0.2, 0.5, 0.8];
        let mut net = build_sr_network(4, 3, 8, mean, 3).unwrap();
        for (_, p) in net.params_mut() {
            p.fill(0.0);
        }
        let x = Array3::from_shape_fn((8, 9, 3), |(y, xx, c)| ((y * 9 + xx + c) as f64 * 0.3).sin());
        let y = net.upscale(&x).unwrap();
        assert_eq!(y.dim(), (32, 36, 3));
        for ((_, _, c), v) in y.indexed_iter() {
            assert_eq!(*v, mean[c]);
        }
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let net = tiny_net(2, 11);
        let x = Array3::from_elem((10, 12, 3), 0.6);
        let y = net.upscale(&x).unwrap();
        // Reflective padding preserves constancy everywhere, which subsumes
        // the interior-crop equivariance claim at tolerance 1e-5.
        for c in 0..3 {
            let chan = y.slice(ndarray::s![.., .., c]);
            let first = chan[[0usize, 0usize]];
            for v in chan.iter() {
                assert_abs_diff_eq!(*v, first, epsilon = 1e-10);
            }
            let interior = y.slice(ndarray::s![4..-4, 4..-4, c]);
            for v in interior.iter() {
                assert_abs_diff_eq!(*v, first, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn upscale_input_validation() {
        let net = tiny_net(2, 1);
        let small = Array3::zeros((4, 12, 3));
        assert!(net.upscale(&small).is_err());
        let wrong_channels = Array3::zeros((8, 8, 4));
        assert!(net.upscale(&wrong_channels).is_err());
        let mut bad = Array3::zeros((8, 8, 3));
        bad[[3, 3, 1]] = f64::NAN;
        assert!(net.upscale(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shape_contract(h in 8usize..13, w in 8usize..13, ratio in prop::sample::select(vec![2u32, 4, 8]), blocks in 0usize..3) {
            let net = build_sr_network(ratio, blocks, 4, [0.0; 3], 5).unwrap();
            let x = Array3::from_shape_fn((h, w, 3), |(y, xx, c)| ((y + xx + c) as f64 * 0.17).cos() * 0.5 + 0.5);
            let y = net.upscale(&x).unwrap();
            prop_assert_eq!(y.dim(), (h * ratio as usize, w * ratio as usize, 3));
        }
    }

    #[test]
    fn cached_forward_matches_plain_forward() {
        let net = tiny_net(4, 21);
        let x = Array3::from_shape_fn((8, 8, 3), |(y, xx, c)| ((y * 8 + xx) as f64 * 0.11 + c as f64 * 0.05).sin() * 0.5 + 0.5);
        let plain = net.upscale(&x).unwrap();
        let (cached, _) = net.upscale_with_cache(&x).unwrap();
        assert_eq!(plain, cached);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = tiny_net(2, 13);
        let x = Array3::from_shape_fn((8, 8, 3), |(y, xx, c)| {
            ((y * 8 + xx) as f64 * 0.29 + c as f64 * 0.7).sin() * 0.4 + 0.5
        });
        // Loss = ||upscale(x)||^2 as the differentiability invariant demands.
        let loss = |net: &SrNetwork, x: &Array3<f64>| {
            let y = net.upscale(x).unwrap();
            (&y * &y).sum()
        };
        let (y, cache) = net.upscale_with_cache(&x).unwrap();
        let mut grads = SrGrads::zeros_like(&net);
        let d_out = y.mapv(|v| 2.0 * v);
        let dx = net.upscale_backward(&cache, &d_out, &mut grads).unwrap();

        let step = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);

        let mut xp = x.clone();
        for idx in [(0, 0, 0), (3, 4, 1), (7, 7, 2), (5, 2, 0), (1, 6, 2)] {
            let orig = xp[idx];
            xp[idx] = orig + step;
            let hi = loss(&net, &xp);
            xp[idx] = orig - step;
            let lo = loss(&net, &xp);
            xp[idx] = orig;
            let fd = (hi - lo) / (2.0 * step);
            assert!(rel(fd, dx[idx]) < 1e-3, "input {idx:?}: fd {fd} vs analytic {}", dx[idx]);
        }

        // Probe a few parameters across every layer kind.
        let grad_map: BTreeMap<String, Vec<f64>> =
            grads.params().into_iter().map(|(n, g)| (n, g.to_vec())).collect();
        for (name, offset) in [
            ("head.weight", 5usize),
            ("head.bias", 0),
            ("block0.conv1.weight", 17),
            ("block1.conv2.weight", 3),
            ("block0.conv2.bias", 1),
            ("body_end.weight", 40),
            ("up0.weight", 11),
            ("up0.bias", 2),
            ("tail.weight", 8),
            ("tail.bias", 2),
        ] {
            let analytic = grad_map[name][offset];
            let (hi, lo) = {
                let probe = |net: &mut SrNetwork, delta: f64| {
                    for (n, p) in net.params_mut() {
                        if n == name {
                            p[offset] += delta;
                        }
                    }
                };
                probe(&mut net, step);
                let hi = loss(&net, &x);
                probe(&mut net, -2.0 * step);
                let lo = loss(&net, &x);
                probe(&mut net, step);
                (hi, lo)
            };
            let fd = (hi - lo) / (2.0 * step);
            assert!(
                rel(fd, analytic) < 1e-3,
                "{name}[{offset}]: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn archive_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sr.nsr");
        let net = tiny_net(4, 31);
        net.to_archive().unwrap().write(&path).unwrap();
        let loaded = SrNetwork::from_archive(&Archive::read(&path).unwrap()).unwrap();
        assert_eq!(loaded.ratio(), 4);
        assert_eq!(loaded.mean_shift(), net.mean_shift());
        for ((n1, p1), (n2, p2)) in net.params().into_iter().zip(loaded.params()) {
            assert_eq!(n1, n2);
            assert_eq!(p1, p2, "array {n1} altered by round trip");
        }
        let x = Array3::from_shape_fn((8, 8, 3), |(y, xx, c)| ((y + 2 * xx + c) as f64 * 0.37).sin());
        let a = net.upscale(&x).unwrap();
        let b = loaded.upscale(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_load_rejects_wrong_ratio_naming_the_array() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r4.nsr");
        tiny_net(4, 1).to_archive().unwrap().write(&path).unwrap();
        // Ratio-2 network: the checkpoint's up1.* has no counterpart.
        let mut two = tiny_net(2, 2);
        let err = load_pretrained(&mut two, &path, true).unwrap_err();
        assert!(err.to_string().contains("up1"), "unexpected error: {err}");
        // Ratio-8 network: the network's up2.* is missing from the checkpoint.
        let mut eight = tiny_net(8, 2);
        let err = load_pretrained(&mut eight, &path, true).unwrap_err();
        assert!(err.to_string().contains("up2"), "unexpected error: {err}");
    }

    #[test]
    fn non_strict_body_only_load_keeps_tail_init() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("body.nsr");
        let donor = tiny_net(2, 41);
        let mut partial = Archive::new("sr");
        let shapes = donor.param_shapes();
        for ((name, data), (_, shape)) in donor.params().into_iter().zip(shapes) {
            if !name.starts_with("tail.") && !name.starts_with("up") {
                partial.push(name, &shape, data.to_vec());
            }
        }
        partial.write(&path).unwrap();

        let mut net = tiny_net(2, 42);
        let before: BTreeMap<String, Vec<f64>> =
            net.params().into_iter().map(|(n, p)| (n, p.to_vec())).collect();
        // Strict mode must refuse the subset.
        assert!(load_pretrained(&mut net, &path, true).is_err());
        load_pretrained(&mut net, &path, false).unwrap();
        let donor_map: BTreeMap<String, Vec<f64>> =
            donor.params().into_iter().map(|(n, p)| (n, p.to_vec())).collect();
        for (name, p) in net.params() {
            if name.starts_with("tail.") || name.starts_with("up") {
                assert_eq!(p, before[&name].as_slice(), "{name} should keep its initialization");
            } else {
                assert_eq!(p, donor_map[&name].as_slice(), "{name} should come from the checkpoint");
            }
        }
    }

    #[test]
    fn shape_mismatch_errors_in_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.nsr");
        build_sr_network(2, 2, 8, [0.0; 3], 1).unwrap().to_archive().unwrap().write(&path).unwrap();
        let mut narrow = tiny_net(2, 2);
        for strict in [true, false] {
            let err = load_pretrained(&mut narrow, &path, strict).unwrap_err();
            assert!(err.to_string().contains("head.weight"), "unexpected error: {err}");
        }
    }

    #[test]
    fn translated_load_maps_foreign_names() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("foreign.nsr");
        let table = dir.path().join("names.json");
        let donor = tiny_net(2, 51);
        let mut foreign = Archive::new("imported");
        let shapes = donor.param_shapes();
        for ((name, data), (_, shape)) in donor.params().into_iter().zip(shapes) {
            foreign.push(format!("model.{name}.data"), &shape, data.to_vec());
        }
        foreign.write(&ckpt).unwrap();
        std::fs::write(
            &table,
            serde_json::to_string(&BTreeMap::from([
                ("head.weight".to_string(), "model.head.weight.data".to_string()),
                ("head.bias".to_string(), "model.head.bias.data".to_string()),
            ]))
            .unwrap(),
        )
        .unwrap();

        let mut net = tiny_net(2, 52);
        let tail_before: Vec<f64> =
            net.params().iter().find(|(n, _)| n == "tail.weight").unwrap().1.to_vec();
        load_translated(&mut net, &ckpt, &table).unwrap();
        let donor_head: Vec<f64> =
            donor.params().iter().find(|(n, _)| n == "head.weight").unwrap().1.to_vec();
        let net_head: Vec<f64> =
            net.params().iter().find(|(n, _)| n == "head.weight").unwrap().1.to_vec();
        assert_eq!(net_head, donor_head);
        let tail_after: Vec<f64> =
            net.params().iter().find(|(n, _)| n == "tail.weight").unwrap().1.to_vec();
        assert_eq!(tail_before, tail_after);

        let bad_table = dir.path().join("bad.json");
        std::fs::write(
            &bad_table,
            serde_json::to_string(&BTreeMap::from([(
                "nonexistent.weight".to_string(),
                "model.head.weight.data".to_string(),
            )]))
            .unwrap(),
        )
        .unwrap();
        assert!(load_translated(&mut net, &ckpt, &bad_table).is_err());
    }
}
