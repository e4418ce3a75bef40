//! A small fully convolutional segmentation network: 3x3 same-padded
//! conv + ReLU layers followed by a per-pixel linear classifier with one
//! weight vector and bias per class.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labelspace::{ClassId, ClassSet};
use crate::math;
use crate::numerics::Grid;

const TAPS: usize = 9;

/// Shape of the convolutional trunk.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Architecture {
    pub input_channels: usize,
    /// Output channels of each conv layer, in order.
    pub conv_channels: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_channels: 3,
            conv_channels: vec![16, 16, 16],
        }
    }
}

/// A 3x3 convolution with same padding. Kernels are stored
/// `out x in x 3 x 3`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
    pub relu: bool,
}

impl ConvLayer {
    fn validate(&self) -> Result<()> {
        if self.kernels.len() != self.out_channels * self.in_channels * TAPS
            || self.biases.len() != self.out_channels
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Shape(format!(
                "conv layer {}->{} with {} kernel and {} bias values",
                self.in_channels,
                self.out_channels,
                self.kernels.len(),
                self.biases.len()
            )));
        }
        Ok(())
    }

    /// Kernels rearranged to `tap x in x out` so the innermost loops run
    /// over contiguous output channels.
    fn tap_major(&self) -> Vec<f64> {
        let (ic, oc) = (self.in_channels, self.out_channels);
        let mut out = vec![0.0; self.kernels.len()];
        for o in 0..oc {
            for i in 0..ic {
                for t in 0..TAPS {
                    out[(t * ic + i) * oc + o] = self.kernels[(o * ic + i) * TAPS + t];
                }
            }
        }
        out
    }
}

/// Per-class linear classifier `logit_c = w_c · feature + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub classes: ClassSet,
    pub feature_dim: usize,
    /// `classes.len() x feature_dim`, row per class in layout order.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ClassifierHead {
    fn validate(&self) -> Result<()> {
        if self.classes.is_empty()
            || self.weights.len() != self.classes.len() * self.feature_dim
            || self.biases.len() != self.classes.len()
        {
            return Err(Error::Shape(format!(
                "head with {} classes, feature dim {}, {} weights, {} biases",
                self.classes.len(),
                self.feature_dim,
                self.weights.len(),
                self.biases.len()
            )));
        }
        Ok(())
    }

    pub fn class_weights(&self, class: ClassId) -> Option<(&[f64], f64)> {
        let k = self.classes.position(class)?;
        Some((&self.weights[k * self.feature_dim..(k + 1) * self.feature_dim], self.biases[k]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    layers: Vec<ConvLayer>,
    head: ClassifierHead,
}

/// Whether a parameter tensor receives weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Activations kept by [`SegModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    input: Grid,
    activations: Vec<Grid>,
}

impl ForwardCache {
    /// Output of the last conv layer (the classifier's input features).
    pub fn features(&self) -> &Grid {
        self.activations.last().unwrap_or(&self.input)
    }
}

/// Gradients for every parameter of a [`SegModel`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub conv: Vec<(Vec<f64>, Vec<f64>)>,
    pub head_weights: Vec<f64>,
    pub head_biases: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(model: &SegModel) -> Self {
        Self {
            conv: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.kernels.len()], vec![0.0; l.biases.len()]))
                .collect(),
            head_weights: vec![0.0; model.head.weights.len()],
            head_biases: vec![0.0; model.head.biases.len()],
        }
    }

    /// Tensors in the same order as [`SegModel::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.conv.len() + 2);
        for (k, b) in &self.conv {
            out.push(k);
            out.push(b);
        }
        out.push(&self.head_weights);
        out.push(&self.head_biases);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.conv.len() + 2);
        for (k, b) in &mut self.conv {
            out.push(k);
            out.push(b);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_biases);
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len() || mine.iter().zip(&theirs).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("gradient layouts differ".into()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl SegModel {
    /// Seeded initialization: He-normal conv kernels (variance `2 / fan_in`),
    /// normal head weights with variance `1 / feature_dim`, zero biases.
    pub fn new(arch: &Architecture, classes: ClassSet, seed: u64) -> Result<Self> {
        if arch.input_channels == 0 || arch.conv_channels.contains(&0) {
            return Err(Error::InvalidArgument(format!("degenerate architecture {arch:?}")));
        }
        if classes.is_empty() {
            return Err(Error::Empty("classifier with no classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.conv_channels.len());
        let mut in_channels = arch.input_channels;
        for &out_channels in &arch.conv_channels {
            let std = math::sqrt(2.0 / (in_channels * TAPS) as f64);
            let normal = Normal::new(0.0, std).expect("positive std");
            layers.push(ConvLayer {
                in_channels,
                out_channels,
                kernels: (0..out_channels * in_channels * TAPS)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
                biases: vec![0.0; out_channels],
                relu: true,
            });
            in_channels = out_channels;
        }
        let feature_dim = in_channels;
        let normal = Normal::new(0.0, math::sqrt(1.0 / feature_dim as f64)).expect("positive std");
        let head = ClassifierHead {
            feature_dim,
            weights: (0..classes.len() * feature_dim).map(|_| normal.sample(&mut rng)).collect(),
            biases: vec![0.0; classes.len()],
            classes,
        };
        Self::from_parts(layers, head)
    }

    pub fn from_parts(layers: Vec<ConvLayer>, head: ClassifierHead) -> Result<Self> {
        let mut channels = None;
        for layer in &layers {
            layer.validate()?;
            if let Some(prev) = channels {
                if prev != layer.in_channels {
                    return Err(Error::Shape(format!(
                        "layer expects {} input channels, previous layer emits {prev}",
                        layer.in_channels
                    )));
                }
            }
            channels = Some(layer.out_channels);
        }
        head.validate()?;
        if let Some(c) = channels {
            if c != head.feature_dim {
                return Err(Error::Shape(format!(
                    "head feature dim {} but trunk emits {c}",
                    head.feature_dim
                )));
            }
        }
        let all_finite = layers
            .iter()
            .flat_map(|l| l.kernels.iter().chain(&l.biases))
            .chain(head.weights.iter().chain(&head.biases))
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidArgument("non-finite model parameter".into()));
        }
        Ok(Self { layers, head })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    /// The classes this model predicts, in channel order.
    pub fn label_space(&self) -> &ClassSet {
        &self.head.classes
    }

    pub fn input_channels(&self) -> usize {
        self.layers.first().map_or(self.head.feature_dim, |l| l.in_channels)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_channels: self.input_channels(),
            conv_channels: self.layers.iter().map(|l| l.out_channels).collect(),
        }
    }

    /// FNV-1a hash over the shapes, class list and parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.layers.len() as u64);
        for l in &self.layers {
            h.write_u64(l.in_channels as u64);
            h.write_u64(l.out_channels as u64);
            h.write_u64(l.relu as u64);
            l.kernels.iter().chain(&l.biases).for_each(|v| h.write_u64(v.to_bits()));
        }
        for c in self.head.classes.iter() {
            h.write_u64(c.0 as u64);
        }
        h.write_u64(self.head.feature_dim as u64);
        self.head
            .weights
            .iter()
            .chain(&self.head.biases)
            .for_each(|v| h.write_u64(v.to_bits()));
        h.finish()
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push((ParamKind::Weight, &mut l.kernels));
            out.push((ParamKind::Bias, &mut l.biases));
        }
        out.push((ParamKind::Weight, &mut self.head.weights));
        out.push((ParamKind::Bias, &mut self.head.biases));
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.kernels.len() + l.biases.len()).sum::<usize>()
            + self.head.weights.len()
            + self.head.biases.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.kernels);
            out.extend_from_slice(&l.biases);
        }
        out.extend_from_slice(&self.head.weights);
        out.extend_from_slice(&self.head.biases);
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut rest = values;
        for (_, t) in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Logits `H x W x |label_space|` plus the cache needed by
    /// [`SegModel::backward`].
    pub fn forward(&self, image: &Grid) -> Result<(Grid, ForwardCache)> {
        self.check_input(image)?;
        let mut activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = activations.last().unwrap_or(image);
            activations.push(conv_forward(layer, input));
        }
        let features = activations.last().unwrap_or(image);
        let logits = head_forward(&self.head, features);
        Ok((
            logits,
            ForwardCache {
                fingerprint: self.fingerprint(),
                input: image.clone(),
                activations,
            },
        ))
    }

    /// Forward pass without keeping activations around.
    pub fn logits(&self, image: &Grid) -> Result<Grid> {
        self.check_input(image)?;
        let mut current: Option<Grid> = None;
        for layer in &self.layers {
            let next = conv_forward(layer, current.as_ref().unwrap_or(image));
            current = Some(next);
        }
        Ok(head_forward(&self.head, current.as_ref().unwrap_or(image)))
    }

    /// Per-pixel argmax class.
    pub fn predict(&self, image: &Grid) -> Result<Vec<ClassId>> {
        let logits = self.logits(image)?;
        Ok(argmax_classes(&logits, &self.head.classes))
    }

    fn check_input(&self, image: &Grid) -> Result<()> {
        if image.channels() != self.input_channels() {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                image.channels(),
                self.input_channels()
            )));
        }
        if image.pixels() == 0 {
            return Err(Error::Empty("image with no pixels"));
        }
        image.check_finite()
    }

    /// Chain rule from `grad_logits` back to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Grid) -> Result<ParamGrads> {
        if cache.fingerprint != self.fingerprint() {
            return Err(Error::StaleCache);
        }
        let features = cache.features();
        if grad_logits.height() != features.height()
            || grad_logits.width() != features.width()
            || grad_logits.channels() != self.head.classes.len()
        {
            return Err(Error::Shape(format!(
                "logit gradient {}x{}x{} does not match the forward pass",
                grad_logits.height(),
                grad_logits.width(),
                grad_logits.channels()
            )));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut upstream = head_backward(
            &self.head,
            features,
            grad_logits,
            &mut grads.head_weights,
            &mut grads.head_biases,
        );
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = if l == 0 { &cache.input } else { &cache.activations[l - 1] };
            let (gk, gb) = &mut grads.conv[l];
            upstream = conv_backward(layer, input, &cache.activations[l], &upstream, gk, gb, l > 0);
        }
        Ok(grads)
    }
}

/// Per-pixel argmax over channels, mapped through `layout`. Ties go to the
/// lowest channel.
pub fn argmax_classes(logits: &Grid, layout: &ClassSet) -> Vec<ClassId> {
    (0..logits.pixels())
        .map(|p| {
            let row = logits.pixel(p);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            layout.as_slice()[best]
        })
        .collect()
}

fn conv_forward(layer: &ConvLayer, input: &Grid) -> Grid {
    let (h, w) = (input.height(), input.width());
    let (ic, oc) = (layer.in_channels, layer.out_channels);
    let weights = layer.tap_major();
    let mut out = Grid::zeros(h, w, oc);
    let src = input.data();
    let dst = out.data_mut();
    for r in 0..h {
        for c in 0..w {
            let o = &mut dst[(r * w + c) * oc..(r * w + c + 1) * oc];
            o.copy_from_slice(&layer.biases);
            for ky in 0..3 {
                let Some(rr) = (r + ky).checked_sub(1).filter(|&v| v < h) else { continue };
                for kx in 0..3 {
                    let Some(cc) = (c + kx).checked_sub(1).filter(|&v| v < w) else { continue };
                    let t = ky * 3 + kx;
                    let pix = &src[(rr * w + cc) * ic..(rr * w + cc + 1) * ic];
                    let wt = &weights[t * ic * oc..(t + 1) * ic * oc];
                    for (i, &v) in pix.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (acc, &k) in o.iter_mut().zip(&wt[i * oc..(i + 1) * oc]) {
                            *acc += v * k;
                        }
                    }
                }
            }
            if layer.relu {
                for v in o.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns the gradient w.r.t. the
/// layer input (zeros when `input_grad` is false).
fn conv_backward(
    layer: &ConvLayer,
    input: &Grid,
    output: &Grid,
    grad_out: &Grid,
    grad_kernels: &mut [f64],
    grad_biases: &mut [f64],
    input_grad: bool,
) -> Grid {
    let (h, w) = (input.height(), input.width());
    let (ic, oc) = (layer.in_channels, layer.out_channels);
    let weights = layer.tap_major();
    let mut gk_tap = vec![0.0; weights.len()];
    let mut grad_in = Grid::zeros(h, w, if input_grad { ic } else { 0 });
    let src = input.data();
    let mut g_pre = vec![0.0; oc];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let go = grad_out.pixel(p);
            let out = output.pixel(p);
            let mut any = false;
            for o in 0..oc {
                g_pre[o] = if layer.relu && out[o] <= 0.0 { 0.0 } else { go[o] };
                any |= g_pre[o] != 0.0;
            }
            if !any {
                continue;
            }
            for (gb, g) in grad_biases.iter_mut().zip(&g_pre) {
                *gb += g;
            }
            for ky in 0..3 {
                let Some(rr) = (r + ky).checked_sub(1).filter(|&v| v < h) else { continue };
                for kx in 0..3 {
                    let Some(cc) = (c + kx).checked_sub(1).filter(|&v| v < w) else { continue };
                    let t = ky * 3 + kx;
                    let q = rr * w + cc;
                    let pix = &src[q * ic..(q + 1) * ic];
                    let gk = &mut gk_tap[t * ic * oc..(t + 1) * ic * oc];
                    for (i, &v) in pix.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (acc, &g) in gk[i * oc..(i + 1) * oc].iter_mut().zip(&g_pre) {
                            *acc += v * g;
                        }
                    }
                    if input_grad {
                        let wt = &weights[t * ic * oc..(t + 1) * ic * oc];
                        let gi = grad_in.pixel_mut(q);
                        for (i, acc) in gi.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for (&k, &g) in wt[i * oc..(i + 1) * oc].iter().zip(&g_pre) {
                                s += k * g;
                            }
                            *acc += s;
                        }
                    }
                }
            }
        }
    }
    for o in 0..oc {
        for i in 0..ic {
            for t in 0..TAPS {
                grad_kernels[(o * ic + i) * TAPS + t] += gk_tap[(t * ic + i) * oc + o];
            }
        }
    }
    grad_in
}

fn head_forward(head: &ClassifierHead, features: &Grid) -> Grid {
    let k = head.classes.len();
    let f = head.feature_dim;
    let mut out = Grid::zeros(features.height(), features.width(), k);
    for p in 0..features.pixels() {
        let x = features.pixel(p);
        for (c, o) in out.pixel_mut(p).iter_mut().enumerate() {
            let wrow = &head.weights[c * f..(c + 1) * f];
            let mut s = head.biases[c];
            for (a, b) in wrow.iter().zip(x) {
                s += a * b;
            }
            *o = s;
        }
    }
    out
}

fn head_backward(
    head: &ClassifierHead,
    features: &Grid,
    grad_logits: &Grid,
    grad_weights: &mut [f64],
    grad_biases: &mut [f64],
) -> Grid {
    let f = head.feature_dim;
    let mut grad_features = Grid::zeros(features.height(), features.width(), f);
    for p in 0..features.pixels() {
        let x = features.pixel(p);
        let g = grad_logits.pixel(p);
        let gx = grad_features.pixel_mut(p);
        for (c, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            grad_biases[c] += gc;
            let wrow = &head.weights[c * f..(c + 1) * f];
            let gw = &mut grad_weights[c * f..(c + 1) * f];
            for j in 0..f {
                gw[j] += gc * x[j];
                gx[j] += gc * wrow[j];
            }
        }
    }
    grad_features
}

/// How the classifier rows of newly added classes are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum InitStrategy {
    /// Every class of `C^t` (background included) copies the old background
    /// row, with `ln |C^t|` subtracted from its bias, so the old background
    /// probability is split evenly among them.
    Mib,
    /// New rows drawn from `N(0, 0.01^2)`; the background row is kept.
    Random { seed: u64 },
}

/// Adds the classes of `new_classes` (which must contain the background and
/// share nothing else with the current head) to the classifier.
pub fn expand_head(model: &SegModel, new_classes: &ClassSet, strategy: InitStrategy) -> Result<SegModel> {
    let old = &model.head.classes;
    let b = ClassId::BACKGROUND;
    let Some((bg_weights, bg_bias)) = model.head.class_weights(b) else {
        return Err(Error::InvalidArgument("head has no background row to expand from".into()));
    };
    if !new_classes.contains(b) {
        return Err(Error::InvalidArgument(format!(
            "new classes {new_classes} must include the background"
        )));
    }
    let shared = old.intersection(new_classes);
    if shared.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "new classes {new_classes} overlap the existing head {old} beyond the background"
        )));
    }
    let layout = old.union(new_classes);
    let f = model.head.feature_dim;
    let split_bias = bg_bias - math::ln(new_classes.len() as f64);
    let mut rng = match strategy {
        InitStrategy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        InitStrategy::Mib => None,
    };
    let noise = Normal::new(0.0, 0.01).expect("positive std");
    let mut weights = Vec::with_capacity(layout.len() * f);
    let mut biases = Vec::with_capacity(layout.len());
    for c in layout.iter() {
        match (strategy, new_classes.contains(c)) {
            (InitStrategy::Mib, true) => {
                weights.extend_from_slice(bg_weights);
                biases.push(split_bias);
            }
            (InitStrategy::Random { .. }, true) if !c.is_background() => {
                let rng = rng.as_mut().expect("seeded for random init");
                weights.extend((0..f).map(|_| noise.sample(rng)));
                biases.push(noise.sample(rng));
            }
            _ => {
                let (w, bias) = model.head.class_weights(c).expect("existing class");
                weights.extend_from_slice(w);
                biases.push(bias);
            }
        }
    }
    SegModel::from_parts(
        model.layers.clone(),
        ClassifierHead {
            classes: layout,
            feature_dim: f,
            weights,
            biases,
        },
    )
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= u64::from(byte);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
