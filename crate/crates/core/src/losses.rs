//! Segmentation losses with analytic gradients w.r.t. the logits.
//!
//! Every loss here is a weighted sum of per-pixel terms of the form
//!
//! ```text
//! -log( sum_{k in num} q(i,k) / sum_{k in den} q(i,k) ),   num ⊆ den
//! ```
//!
//! whose gradient w.r.t. logit `z_j` is `softmax_den(z)_j - softmax_num(z)_j`
//! (each restricted to its own channel set). Plain cross-entropy takes
//! `num = {y}` and `den = all`; the background-folded variants enlarge `num`;
//! standard distillation shrinks `den` to the old classes. All terms are
//! evaluated in log space and the ratio is floored at [`PROB_FLOOR`], inside
//! which the term is constant and contributes no gradient.
//!
//! Logit grids carry no class information of their own: each function takes
//! the [`ClassSet`] describing the channel order.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labelspace::{present_classes, Annotation, ClassId, ClassSet, Mode};
use crate::math;
use crate::numerics::{Grid, ProbGrid};

/// Lower clamp applied to every probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `ln(PROB_FLOOR)`.
const LOG_FLOOR: f64 = -27.631_021_115_928_547;

/// Largest channel count the bitmask representation supports.
pub const MAX_CHANNELS: usize = 64;

/// Weights of the two auxiliary terms.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LossConfig {
    /// Distillation weight.
    pub lambda: f64,
    /// Weight of the unlabeled-pixel term.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            gamma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A loss value and its gradient w.r.t. the logits it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad_logits: Grid,
}

impl LossReport {
    /// `self + scale * other`, value and gradient alike.
    pub fn add_scaled(mut self, other: &LossReport, scale: f64) -> Result<Self> {
        self.value += scale * other.value;
        self.grad_logits.add_scaled(&other.grad_logits, scale)?;
        Ok(self)
    }
}

/// Per-labeled-pixel weights `alpha_i`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PointWeights {
    #[default]
    Uniform,
    /// One weight per pixel; only labeled pixels are read and they must be
    /// positive.
    PerPixel(Vec<f64>),
}

impl PointWeights {
    #[inline]
    fn at(&self, pixel: usize) -> f64 {
        match self {
            PointWeights::Uniform => 1.0,
            PointWeights::PerPixel(w) => w[pixel],
        }
    }

    fn validate(&self, annotation: &Annotation) -> Result<()> {
        if let PointWeights::PerPixel(w) = self {
            if w.len() != annotation.pixels() {
                return Err(Error::Shape(format!(
                    "{} point weights for {} pixels",
                    w.len(),
                    annotation.pixels()
                )));
            }
            for i in annotation.labeled_indices() {
                if !(w[i] > 0.0 && w[i].is_finite()) {
                    return Err(Error::InvalidArgument(format!("point weight {} at pixel {i}", w[i])));
                }
            }
        }
        Ok(())
    }
}

type Mask = u64;

#[inline]
fn bit(channel: usize) -> Mask {
    1 << channel
}

fn full_mask(channels: usize) -> Mask {
    if channels == MAX_CHANNELS {
        Mask::MAX
    } else {
        (1 << channels) - 1
    }
}

fn subset_mask(layout: &ClassSet, subset: &ClassSet) -> Result<Mask> {
    subset.iter().try_fold(0, |m, c| {
        layout.position(c).map(|k| m | bit(k)).ok_or(Error::UnknownClass(c))
    })
}

fn check_layout(logits: &Grid, layout: &ClassSet) -> Result<()> {
    if logits.channels() != layout.len() {
        return Err(Error::Shape(format!(
            "{} logit channels for a layout of {} classes",
            logits.channels(),
            layout.len()
        )));
    }
    if layout.len() > MAX_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "{} channels exceed the supported {MAX_CHANNELS}",
            layout.len()
        )));
    }
    if layout.is_empty() {
        return Err(Error::Empty("empty channel layout"));
    }
    logits.check_finite()
}

fn check_annotation(logits: &Grid, annotation: &Annotation) -> Result<()> {
    if annotation.height() != logits.height() || annotation.width() != logits.width() {
        return Err(Error::Shape(format!(
            "annotation {}x{} vs logits {}x{}",
            annotation.height(),
            annotation.width(),
            logits.height(),
            logits.width()
        )));
    }
    Ok(())
}

fn check_old_probs(logits: &Grid, probs_old: &ProbGrid, old_classes: &ClassSet) -> Result<()> {
    if probs_old.channels() != old_classes.len() || probs_old.pixels() != logits.pixels() {
        return Err(Error::Shape(format!(
            "old probabilities have {} channels x {} pixels, expected {} x {}",
            probs_old.channels(),
            probs_old.pixels(),
            old_classes.len(),
            logits.pixels()
        )));
    }
    Ok(())
}

#[inline]
fn lse_masked(z: &[f64], mask: Mask) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in z.iter().enumerate() {
        if mask & bit(j) != 0 && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, &v) in z.iter().enumerate() {
        if mask & bit(j) != 0 {
            sum += math::exp(v - max);
        }
    }
    max + math::ln(sum)
}

/// `-log(mass(num) / mass(den))`, floored. Adds `weight * d/dz` into `grad`
/// and returns the unweighted term.
#[inline]
fn neg_log_ratio(z: &[f64], num: Mask, den: Mask, lse_den: f64, weight: f64, grad: &mut [f64]) -> f64 {
    let lse_num = lse_masked(z, num);
    // num ⊆ den, so a positive ratio is rounding noise.
    let log_ratio = (lse_num - lse_den).min(0.0);
    if log_ratio < LOG_FLOOR {
        return -LOG_FLOOR;
    }
    if weight != 0.0 {
        for (j, (&v, g)) in z.iter().zip(grad.iter_mut()).enumerate() {
            let mut d = 0.0;
            if den & bit(j) != 0 {
                d += math::exp(v - lse_den);
            }
            if num & bit(j) != 0 {
                d -= math::exp(v - lse_num);
            }
            *g += weight * d;
        }
    }
    -log_ratio
}

/// Folds the channels of `fold_set` into `fold_target`:
/// `p(c) = q(c)` outside the fold and `p(target) = sum_{k in fold} q(k)`.
///
/// Returns the table and its channel layout
/// `(layout \ fold_set) ∪ {fold_target}`.
pub fn aggregate_prob(
    q: &ProbGrid,
    layout: &ClassSet,
    fold_set: &ClassSet,
    fold_target: ClassId,
) -> Result<(Grid, ClassSet)> {
    if q.channels() != layout.len() {
        return Err(Error::Shape(format!(
            "{} probability channels for a layout of {} classes",
            q.channels(),
            layout.len()
        )));
    }
    if fold_set.is_empty() {
        return Err(Error::Empty("fold set"));
    }
    if !fold_set.contains(fold_target) {
        return Err(Error::InvalidArgument(format!(
            "fold target {fold_target} is not in the fold set {fold_set}"
        )));
    }
    let fold_channels: Vec<usize> = fold_set
        .iter()
        .map(|c| layout.position(c).ok_or(Error::UnknownClass(c)))
        .collect::<Result<_>>()?;
    let mut out_layout = layout.difference(fold_set);
    out_layout.insert(fold_target);
    let sources: Vec<Option<usize>> = out_layout
        .iter()
        .map(|c| (c != fold_target).then(|| layout.position(c).expect("kept class")))
        .collect();
    let grid = q.as_grid();
    let mut out = Grid::zeros(grid.height(), grid.width(), out_layout.len());
    for p in 0..grid.pixels() {
        let src = grid.pixel(p);
        let folded: f64 = fold_channels.iter().map(|&k| src[k]).sum();
        for (dst, s) in out.pixel_mut(p).iter_mut().zip(&sources) {
            *dst = match s {
                Some(k) => src[*k],
                None => folded,
            };
        }
    }
    Ok((out, out_layout))
}

/// `q(c) / sum_{k in subset} q(k)` for `c` in `subset`, channels in `subset`
/// order. The denominator is floored at [`PROB_FLOOR`].
pub fn renormalize_over(q: &ProbGrid, layout: &ClassSet, subset: &ClassSet) -> Result<Grid> {
    if q.channels() != layout.len() {
        return Err(Error::Shape(format!(
            "{} probability channels for a layout of {} classes",
            q.channels(),
            layout.len()
        )));
    }
    let channels: Vec<usize> = subset
        .iter()
        .map(|c| layout.position(c).ok_or(Error::UnknownClass(c)))
        .collect::<Result<_>>()?;
    let grid = q.as_grid();
    let mut out = Grid::zeros(grid.height(), grid.width(), channels.len());
    for p in 0..grid.pixels() {
        let src = grid.pixel(p);
        let denom = channels.iter().map(|&k| src[k]).sum::<f64>().max(PROB_FLOOR);
        for (dst, &k) in out.pixel_mut(p).iter_mut().zip(&channels) {
            *dst = src[k] / denom;
        }
    }
    Ok(out)
}

/// Shared body of every cross-entropy flavour: `-(1/norm) sum_i alpha_i
/// log p(i, y_i)` over labeled pixels, where a background label is scored
/// against `background_num` (the background alone, or the old classes too).
fn labeled_ce(
    logits: &Grid,
    layout: &ClassSet,
    annotation: &Annotation,
    weights: &PointWeights,
    background_num: Option<Mask>,
    require_dense: bool,
) -> Result<LossReport> {
    check_layout(logits, layout)?;
    check_annotation(logits, annotation)?;
    weights.validate(annotation)?;
    let channels = logits.channels();
    let all = full_mask(channels);
    let mut labeled = 0usize;
    for (i, label) in annotation.labels().iter().enumerate() {
        match label {
            Some(c) if !layout.contains(*c) => return Err(Error::UnknownClass(*c)),
            Some(_) => labeled += 1,
            None if require_dense => return Err(Error::UnlabeledPixel(i)),
            None => {}
        }
    }
    if labeled == 0 {
        return Err(Error::Empty("annotation has no labeled pixel"));
    }
    let norm = labeled as f64;
    let mut grad = Grid::zeros(logits.height(), logits.width(), channels);
    let mut total = 0.0;
    for (i, label) in annotation.labels().iter().enumerate() {
        let Some(y) = label else { continue };
        let k = layout.position(*y).expect("checked above");
        let num = match background_num {
            Some(m) if y.is_background() => m,
            _ => bit(k),
        };
        let z = logits.pixel(i);
        let alpha = weights.at(i);
        let lse_all = lse_masked(z, all);
        total += alpha * neg_log_ratio(z, num, all, lse_all, alpha / norm, grad.pixel_mut(i));
    }
    Ok(LossReport {
        value: total / norm,
        grad_logits: grad,
    })
}

/// Standard per-pixel cross-entropy averaged over all pixels. Every pixel
/// must be labeled.
pub fn ce_standard(logits: &Grid, layout: &ClassSet, annotation: &Annotation) -> Result<LossReport> {
    labeled_ce(logits, layout, annotation, &PointWeights::Uniform, None, true)
}

/// Cross-entropy where a background label is scored against the total
/// probability of the background and the old classes `old_classes`
/// (which must contain the background). Other labels are scored as usual.
pub fn mib_ce(
    logits: &Grid,
    layout: &ClassSet,
    annotation: &Annotation,
    old_classes: &ClassSet,
) -> Result<LossReport> {
    check_layout(logits, layout)?;
    if !old_classes.contains(ClassId::BACKGROUND) {
        return Err(Error::InvalidArgument(format!(
            "old classes {old_classes} must include the background"
        )));
    }
    let old = subset_mask(layout, old_classes)?;
    labeled_ce(logits, layout, annotation, &PointWeights::Uniform, Some(old), true)
}

/// Distillation against the old model's soft targets, with the new model's
/// probabilities renormalized over the old classes:
/// `-(1/|I|) sum_i sum_{c in old} q_old(i,c) log(q(i,c) / sum_{k in old} q(i,k))`.
pub fn kd_standard(
    logits_new: &Grid,
    layout_new: &ClassSet,
    probs_old: &ProbGrid,
    old_classes: &ClassSet,
) -> Result<LossReport> {
    check_layout(logits_new, layout_new)?;
    check_old_probs(logits_new, probs_old, old_classes)?;
    let old = subset_mask(layout_new, old_classes)?;
    let numerators: Vec<Mask> = old_classes
        .iter()
        .map(|c| bit(layout_new.position(c).expect("in old mask")))
        .collect();
    distill(logits_new, probs_old, &numerators, old)
}

/// Distillation where the old model's background is matched against the
/// new model's total probability of the background and the classes of
/// `new_classes`; other old classes are matched against the unnormalized
/// new probabilities.
pub fn mib_kd(
    logits_new: &Grid,
    layout_new: &ClassSet,
    probs_old: &ProbGrid,
    old_classes: &ClassSet,
    new_classes: &ClassSet,
) -> Result<LossReport> {
    check_layout(logits_new, layout_new)?;
    check_old_probs(logits_new, probs_old, old_classes)?;
    if !old_classes.contains(ClassId::BACKGROUND) || !new_classes.contains(ClassId::BACKGROUND) {
        return Err(Error::InvalidArgument(format!(
            "old {old_classes} and new {new_classes} class sets must both include the background"
        )));
    }
    subset_mask(layout_new, old_classes)?;
    let new = subset_mask(layout_new, new_classes)?;
    let numerators: Vec<Mask> = old_classes
        .iter()
        .map(|c| {
            if c.is_background() {
                new
            } else {
                bit(layout_new.position(c).expect("in layout"))
            }
        })
        .collect();
    distill(logits_new, probs_old, &numerators, full_mask(logits_new.channels()))
}

fn distill(logits: &Grid, probs_old: &ProbGrid, numerators: &[Mask], den: Mask) -> Result<LossReport> {
    let n = logits.pixels() as f64;
    let mut grad = Grid::zeros(logits.height(), logits.width(), logits.channels());
    let mut total = 0.0;
    for i in 0..logits.pixels() {
        let z = logits.pixel(i);
        let targets = probs_old.pixel(i);
        let lse_den = lse_masked(z, den);
        let g = grad.pixel_mut(i);
        for (&w, &num) in targets.iter().zip(numerators) {
            total += w * neg_log_ratio(z, num, den, lse_den, w / n, g);
        }
    }
    Ok(LossReport {
        value: total / n,
        grad_logits: grad,
    })
}

/// Which distillation an incremental step uses.
#[derive(Debug, Clone, Copy)]
pub struct Distillation<'a> {
    pub probs_old: &'a ProbGrid,
    /// `Y^{t-1}`, the old model's channel layout.
    pub old_classes: &'a ClassSet,
    /// `C^t`, including the background.
    pub new_classes: &'a ClassSet,
}

/// `mib_ce + lambda * mib_kd`. Without an old model (the first step) this
/// is plain cross-entropy.
pub fn objective_incremental(
    logits_new: &Grid,
    layout_new: &ClassSet,
    annotation: &Annotation,
    distillation: Option<Distillation<'_>>,
    config: &LossConfig,
) -> Result<LossReport> {
    config.validate()?;
    let Some(d) = distillation else {
        return ce_standard(logits_new, layout_new, annotation);
    };
    let ce = mib_ce(logits_new, layout_new, annotation, d.old_classes)?;
    if config.lambda == 0.0 {
        return Ok(ce);
    }
    let kd = mib_kd(logits_new, layout_new, d.probs_old, d.old_classes, d.new_classes)?;
    ce.add_scaled(&kd, config.lambda)
}

/// Partial cross-entropy: `-(1/|I_S|) sum_{i in I_S} alpha_i log q(i, y_i)`.
/// Unlabeled pixels get zero gradient.
pub fn pce(
    logits: &Grid,
    layout: &ClassSet,
    annotation: &Annotation,
    weights: &PointWeights,
) -> Result<LossReport> {
    labeled_ce(logits, layout, annotation, weights, None, false)
}

/// Partial cross-entropy plus `gamma` times the mean over unlabeled pixels
/// of `-log sum_{k in fold} q(i,k)`. With `fold = U_x` this is the
/// unlabeled-pixel loss; with `fold = {background}` it is the
/// "unlabeled means background" baseline.
pub fn pce_with_unlabeled_fold(
    logits: &Grid,
    layout: &ClassSet,
    annotation: &Annotation,
    weights: &PointWeights,
    fold: &ClassSet,
    gamma: f64,
) -> Result<LossReport> {
    let mut report = pce(logits, layout, annotation, weights)?;
    let unlabeled = annotation.unlabeled_indices();
    if unlabeled.is_empty() || gamma == 0.0 {
        return Ok(report);
    }
    if fold.is_empty() {
        return Err(Error::Empty("unlabeled fold set"));
    }
    let num = subset_mask(layout, fold)?;
    let all = full_mask(logits.channels());
    let norm = unlabeled.len() as f64;
    let mut total = 0.0;
    for &i in &unlabeled {
        let z = logits.pixel(i);
        let lse_all = lse_masked(z, all);
        total += neg_log_ratio(z, num, all, lse_all, gamma / norm, report.grad_logits.pixel_mut(i));
    }
    report.value += gamma * (total / norm);
    Ok(report)
}

/// The unlabeled-pixel loss: partial cross-entropy on labeled pixels, and on
/// unlabeled ones a push of probability mass onto the classes present in the
/// annotation (plus the background in object mode).
pub fn unl(
    logits: &Grid,
    layout: &ClassSet,
    annotation: &Annotation,
    config: &LossConfig,
    mode: Mode,
) -> Result<LossReport> {
    config.validate()?;
    let fold = present_classes(annotation, mode)?;
    pce_with_unlabeled_fold(logits, layout, annotation, &PointWeights::Uniform, &fold, config.gamma)
}

/// Loss of a batch of images: its value and one gradient per image.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossReport {
    pub value: f64,
    pub grads: Vec<Grid>,
}

/// Mean of [`unl`] over a batch; each image's gradient is scaled by
/// `1 / batch_len`.
pub fn objective_weak(
    batch: &[(&Grid, &Annotation)],
    layout: &ClassSet,
    config: &LossConfig,
    mode: Mode,
) -> Result<BatchLossReport> {
    if batch.is_empty() {
        return Err(Error::Empty("weak objective over an empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for (logits, annotation) in batch {
        let mut r = unl(logits, layout, annotation, config, mode)?;
        value += r.value;
        r.grad_logits.scale(scale);
        grads.push(r.grad_logits);
    }
    Ok(BatchLossReport {
        value: value * scale,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient, softmax};
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(ids: &[u8]) -> ClassSet {
        ClassSet::from_ids(ids).unwrap()
    }

    fn one_pixel(values: &[f64]) -> Grid {
        Grid::from_vec(1, 1, values.len(), values.to_vec()).unwrap()
    }

    fn logits_of(probs: &[f64]) -> Grid {
        one_pixel(&probs.iter().map(|p| math::ln(*p)).collect::<Vec<_>>())
    }

    fn prob(values: &[f64]) -> ProbGrid {
        ProbGrid::from_grid(one_pixel(values)).unwrap()
    }

    fn dense(labels: &[u8], h: usize, w: usize) -> Annotation {
        Annotation::dense(h, w, &labels.iter().map(|&c| ClassId(c)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn aggregate_prob_examples() {
        let layout = set(&[0, 1, 2, 3]);
        let q = prob(&[0.1, 0.2, 0.3, 0.4]);
        let (p, l) = aggregate_prob(&q, &layout, &set(&[0, 1]), ClassId(0)).unwrap();
        assert_eq!(l, set(&[0, 2, 3]));
        let expect = [0.3, 0.3, 0.4];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let (p, l) = aggregate_prob(&q, &layout, &set(&[0]), ClassId(0)).unwrap();
        assert_eq!(l, layout);
        assert_eq!(p.data(), q.as_grid().data());
        let (p, l) = aggregate_prob(&q, &layout, &layout, ClassId(0)).unwrap();
        assert_eq!(l, set(&[0]));
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        assert!(matches!(
            aggregate_prob(&q, &layout, &set(&[0, 9]), ClassId(0)),
            Err(Error::UnknownClass(ClassId(9)))
        ));
        assert!(aggregate_prob(&q, &layout, &set(&[1, 2]), ClassId(0)).is_err());
    }

    #[test]
    fn ce_standard_closed_forms() {
        let layout = set(&[0, 1, 2, 3]);
        let logits = Grid::zeros(2, 2, 4);
        let r = ce_standard(&logits, &layout, &dense(&[0, 1, 2, 3], 2, 2)).unwrap();
        assert!((r.value - math::ln(4.0)).abs() < 1e-12);

        let mut peaked = Grid::zeros(1, 2, 4);
        peaked.set(0, 0, 1, 60.0);
        peaked.set(0, 1, 3, 60.0);
        let r = ce_standard(&peaked, &layout, &dense(&[1, 3], 1, 2)).unwrap();
        assert!(r.value >= 0.0 && r.value < 1e-20);
    }

    #[test]
    fn ce_standard_rejects_unlabeled_and_unknown() {
        let layout = set(&[0, 1]);
        let logits = Grid::zeros(1, 2, 2);
        let partial = Annotation::new(1, 2, vec![Some(ClassId(1)), None]).unwrap();
        assert_eq!(ce_standard(&logits, &layout, &partial), Err(Error::UnlabeledPixel(1)));
        assert_eq!(
            ce_standard(&logits, &layout, &dense(&[0, 5], 1, 2)),
            Err(Error::UnknownClass(ClassId(5)))
        );
        assert!(ce_standard(&Grid::zeros(1, 2, 3), &layout, &dense(&[0, 1], 1, 2)).is_err());
    }

    #[test]
    fn mib_ce_closed_forms() {
        let layout = set(&[0, 1, 2, 3]);
        let logits = Grid::zeros(1, 1, 4);
        let r = mib_ce(&logits, &layout, &dense(&[0], 1, 1), &set(&[0, 1])).unwrap();
        assert!((r.value - core::f64::consts::LN_2).abs() < 1e-12);
        // Non-background labels are plain cross-entropy.
        let r = mib_ce(&logits, &layout, &dense(&[2], 1, 1), &set(&[0, 1])).unwrap();
        assert!((r.value - math::ln(4.0)).abs() < 1e-12);
        assert!(mib_ce(&logits, &layout, &dense(&[0], 1, 1), &set(&[1])).is_err());
    }

    #[test]
    fn kd_closed_forms() {
        let layout = set(&[0, 1, 2]);
        let logits = logits_of(&[0.2, 0.3, 0.5]);
        let old = set(&[0, 1]);
        let q_old = prob(&[0.5, 0.5]);
        let r = kd_standard(&logits, &layout, &q_old, &old).unwrap();
        let expect = -(0.5 * math::ln(0.4) + 0.5 * math::ln(0.6));
        assert!((r.value - expect).abs() < 1e-12);
        assert!((r.value - 0.713558).abs() < 1e-6);

        let r = mib_kd(&logits, &layout, &q_old, &old, &set(&[0, 2])).unwrap();
        let expect = -(0.5 * math::ln(0.7) + 0.5 * math::ln(0.3));
        assert!((r.value - expect).abs() < 1e-12);
        assert!((r.value - 0.780324).abs() < 1e-6);
    }

    #[test]
    fn kd_of_identical_outputs_is_entropy() {
        // New model restricted to the old classes reproduces the old model.
        let layout = set(&[0, 1, 2, 3]);
        let old = set(&[0, 1, 2]);
        let q_old = [0.2, 0.5, 0.3];
        let scale = 0.6;
        let new: Vec<f64> = q_old.iter().map(|p| p * scale).chain([0.4]).collect();
        let r = kd_standard(&logits_of(&new), &layout, &prob(&q_old), &old).unwrap();
        let entropy: f64 = -q_old.iter().map(|p| p * math::ln(*p)).sum::<f64>();
        assert!((r.value - entropy).abs() < 1e-12);
    }

    #[test]
    fn objective_incremental_linearity() {
        let layout = set(&[0, 1, 2]);
        let logits = logits_of(&[0.2, 0.3, 0.5]);
        let old = set(&[0, 1]);
        let new = set(&[0, 2]);
        let q_old = prob(&[0.5, 0.5]);
        let ann = dense(&[0], 1, 1);
        let d = Distillation {
            probs_old: &q_old,
            old_classes: &old,
            new_classes: &new,
        };
        let ce = mib_ce(&logits, &layout, &ann, &old).unwrap();
        let kd = mib_kd(&logits, &layout, &q_old, &old, &new).unwrap();
        let zero = objective_incremental(&logits, &layout, &ann, Some(d), &LossConfig { lambda: 0.0, gamma: 1.0 }).unwrap();
        assert_eq!(zero, ce);
        let one = objective_incremental(&logits, &layout, &ann, Some(d), &LossConfig { lambda: 1.0, gamma: 1.0 }).unwrap();
        // mib_ce here is -ln(0.2 + 0.3).
        assert!((one.value - (core::f64::consts::LN_2 + 0.780324)).abs() < 1e-6);
        for k in 0..3 {
            let sum = ce.grad_logits.data()[k] + kd.grad_logits.data()[k];
            assert!((one.grad_logits.data()[k] - sum).abs() < 1e-12);
        }
        let first = objective_incremental(&logits, &layout, &ann, None, &LossConfig::default()).unwrap();
        assert_eq!(first, ce_standard(&logits, &layout, &ann).unwrap());
        assert!(objective_incremental(&logits, &layout, &ann, None, &LossConfig { lambda: -1.0, gamma: 0.0 }).is_err());
    }

    #[test]
    fn pce_examples() {
        let layout = set(&[0, 1, 2, 3, 4]);
        let logits = Grid::zeros(3, 3, 5);
        let mut ann = Annotation::unlabeled(3, 3);
        ann.set(4, Some(ClassId(2)));
        let r = pce(&logits, &layout, &ann, &PointWeights::Uniform).unwrap();
        assert!((r.value - math::ln(5.0)).abs() < 1e-12);
        for p in 0..9 {
            if p != 4 {
                assert!(r.grad_logits.pixel(p).iter().all(|&g| g == 0.0));
            }
        }
        assert!(pce(&logits, &layout, &Annotation::unlabeled(3, 3), &PointWeights::Uniform).is_err());
        let bad = PointWeights::PerPixel(vec![0.0; 9]);
        assert!(pce(&logits, &layout, &ann, &bad).is_err());
    }

    #[test]
    fn pce_weights_scale_inside_normalizer() {
        let layout = set(&[0, 1]);
        let logits = Grid::zeros(1, 2, 2);
        let ann = dense(&[0, 1], 1, 2);
        let w = PointWeights::PerPixel(vec![3.0, 1.0]);
        let r = pce(&logits, &layout, &ann, &w).unwrap();
        assert!((r.value - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn unl_closed_form() {
        let layout = set(&[0, 1, 2, 3]);
        // Pixel 0: unlabeled with q = [0.1, 0.2, 0.3, 0.4].
        // Pixel 1: labeled 1 with q(1) = 1 (up to exp(-800)).
        let mut data = [0.1f64, 0.2, 0.3, 0.4].map(math::ln).to_vec();
        data.extend([-800.0, 0.0, -800.0, -800.0]);
        let logits = Grid::from_vec(1, 2, 4, data).unwrap();
        let ann = Annotation::new(1, 2, vec![None, Some(ClassId(1))]).unwrap();
        let r = unl(&logits, &layout, &ann, &LossConfig { lambda: 0.0, gamma: 1.0 }, Mode::Object).unwrap();
        assert!((r.value - (-math::ln(0.3))).abs() < 1e-12);
        assert!((r.value - 1.203973).abs() < 1e-6);
    }

    #[test]
    fn unl_without_unlabeled_pixels_is_pce() {
        let layout = set(&[0, 1, 2]);
        let logits = Grid::from_vec(1, 2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let ann = dense(&[2, 0], 1, 2);
        let a = unl(&logits, &layout, &ann, &LossConfig::default(), Mode::Object).unwrap();
        let b = pce(&logits, &layout, &ann, &PointWeights::Uniform).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn objective_weak_batches() {
        let layout = set(&[0, 1, 2]);
        let logits = Grid::from_vec(1, 2, 3, vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let ann = Annotation::new(1, 2, vec![Some(ClassId(1)), None]).unwrap();
        let cfg = LossConfig::default();
        let single = unl(&logits, &layout, &ann, &cfg, Mode::Object).unwrap();
        let one = objective_weak(&[(&logits, &ann)], &layout, &cfg, Mode::Object).unwrap();
        assert_eq!(one.value, single.value);
        assert_eq!(one.grads[0], single.grad_logits);
        let two = objective_weak(&[(&logits, &ann), (&logits, &ann)], &layout, &cfg, Mode::Object).unwrap();
        assert!((two.value - single.value).abs() < 1e-15);
        for (g, s) in two.grads[0].data().iter().zip(single.grad_logits.data()) {
            assert!((2.0 * g - s).abs() < 1e-12);
        }
        assert!(objective_weak(&[], &layout, &cfg, Mode::Object).is_err());
    }

    #[test]
    fn floor_clamps_value_and_gradient() {
        let layout = set(&[0, 1]);
        let logits = one_pixel(&[0.0, -100.0]);
        let r = ce_standard(&logits, &layout, &dense(&[1], 1, 1)).unwrap();
        assert!((r.value - (-LOG_FLOOR)).abs() < 1e-12);
        assert!(r.grad_logits.data().iter().all(|&g| g == 0.0));
        assert!((LOG_FLOOR - math::ln(PROB_FLOOR)).abs() < 1e-12);
    }

    // Gradient checks on small random instances; the acceptance suite runs
    // the full 20-seed, 8x8x5 matrix.
    fn random_logits(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid {
        let data = (0..h * w * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        Grid::from_vec(h, w, c, data).unwrap()
    }

    fn check<F: Fn(&Grid) -> LossReport>(f: F, at: &Grid) {
        let analytic = f(at).grad_logits;
        let numeric = fd_gradient(|g| f(g).value, at, 1e-5).unwrap();
        let cmp = crate::numerics::compare_gradients(analytic.data(), numeric.data(), 1e-8).unwrap();
        assert!(cmp.passes(1e-5), "{cmp:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layout = set(&[0, 1, 2, 3]);
        let old = set(&[0, 1]);
        let new = set(&[0, 2, 3]);
        let logits = random_logits(&mut rng, 3, 3, 4);
        let labels: Vec<u8> = (0..9).map(|_| [0u8, 2, 3][rng.random_range(0..3)]).collect();
        let ann = dense(&labels, 3, 3);
        let q_old = softmax(&random_logits(&mut rng, 3, 3, 2)).unwrap();
        check(|g| ce_standard(g, &layout, &ann).unwrap(), &logits);
        check(|g| mib_ce(g, &layout, &ann, &old).unwrap(), &logits);
        check(|g| kd_standard(g, &layout, &q_old, &old).unwrap(), &logits);
        check(|g| mib_kd(g, &layout, &q_old, &old, &new).unwrap(), &logits);
        let mut sparse = Annotation::unlabeled(3, 3);
        sparse.set(1, Some(ClassId(2)));
        sparse.set(7, Some(ClassId(0)));
        check(|g| pce(g, &layout, &sparse, &PointWeights::Uniform).unwrap(), &logits);
        check(|g| unl(g, &layout, &sparse, &LossConfig::default(), Mode::Object).unwrap(), &logits);
    }

    proptest! {
        #[test]
        fn losses_are_shift_invariant_and_non_negative(seed in any::<u64>(), shifts in proptest::collection::vec(-30.0f64..30.0, 4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = set(&[0, 1, 2]);
            let old = set(&[0, 1]);
            let logits = random_logits(&mut rng, 2, 2, 3);
            let mut shifted = logits.clone();
            for p in 0..4 {
                for v in shifted.pixel_mut(p) {
                    *v += shifts[p];
                }
            }
            let labels: Vec<u8> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let ann = dense(&labels, 2, 2);
            let q_old = softmax(&random_logits(&mut rng, 2, 2, 2)).unwrap();
            let mut sparse = Annotation::unlabeled(2, 2);
            sparse.set(0, Some(ClassId(1)));
            let cfg = LossConfig::default();
            let eval = |g: &Grid| -> [f64; 6] {
                [
                    ce_standard(g, &layout, &ann).unwrap().value,
                    mib_ce(g, &layout, &ann, &old).unwrap().value,
                    kd_standard(g, &layout, &q_old, &old).unwrap().value,
                    mib_kd(g, &layout, &q_old, &old, &set(&[0, 2])).unwrap().value,
                    pce(g, &layout, &sparse, &PointWeights::Uniform).unwrap().value,
                    unl(g, &layout, &sparse, &cfg, Mode::Object).unwrap().value,
                ]
            };
            let a = eval(&logits);
            let b = eval(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(x.is_finite() && *x >= 0.0);
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn aggregate_prob_conserves_mass(seed in any::<u64>(), fold_bits in 1u8..32) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = set(&[0, 1, 2, 3, 4]);
            let q = softmax(&random_logits(&mut rng, 2, 3, 5)).unwrap();
            let fold = ClassSet::new((0..5).filter(|k| fold_bits & (1 << k) != 0).map(|k| ClassId(k as u8))).unwrap();
            let target = fold.as_slice()[0];
            let (p, _) = aggregate_prob(&q, &layout, &fold, target).unwrap();
            for i in 0..6 {
                let before: f64 = q.pixel(i).iter().sum();
                let after: f64 = p.pixel(i).iter().sum();
                prop_assert!((before - after).abs() < 1e-12);
            }
        }
    }
}
