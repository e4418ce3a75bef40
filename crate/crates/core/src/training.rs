//! Optimizer, learning-rate policy and the two experiment drivers.
//!
//! Batches are evaluated through an [`Executor`], which may fan images out
//! to worker threads; gradients are always reduced in image order, so the
//! result does not depend on the executor.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ConfigDigest};
use crate::error::{Error, Result};
use crate::labelspace::{Annotation, ClassId, ClassSet, Label, Mode, StepSchedule};
use crate::losses::{self, Distillation, LossConfig, LossReport, PointWeights};
use crate::math;
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax_classes, expand_head, Architecture, InitStrategy, ParamGrads, ParamKind, SegModel};
use crate::numerics::{softmax, Grid, ProbGrid};
use crate::synthdata::{derive_seed, Sample, Scene, StepDataset};

/// Polynomial decay `base_lr * (1 - iteration / max_iterations)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub max_iterations: usize,
    pub power: f64,
}

pub fn lr_at(schedule: &LrSchedule, iteration: usize) -> Result<f64> {
    if !(schedule.base_lr > 0.0 && schedule.power > 0.0) || schedule.max_iterations == 0 {
        return Err(Error::InvalidArgument(format!("invalid schedule {schedule:?}")));
    }
    if iteration > schedule.max_iterations {
        return Err(Error::InvalidArgument(format!(
            "iteration {iteration} beyond {}",
            schedule.max_iterations
        )));
    }
    let frac = 1.0 - iteration as f64 / schedule.max_iterations as f64;
    Ok(schedule.base_lr * math::powf(frac, schedule.power))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_biases: bool,
    buffers: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(model: &SegModel, momentum: f64, weight_decay: f64, decay_biases: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} must be in [0, 1) and weight decay {weight_decay} >= 0"
            )));
        }
        let buffers = ParamGrads::zeros_like(model).tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            momentum,
            weight_decay,
            decay_biases,
            buffers,
        })
    }
}

/// `v <- m v + g + wd theta`, `theta <- theta - lr v`. Refuses non-finite
/// gradients without touching the model.
pub fn sgd_step(model: &mut SegModel, grads: &ParamGrads, state: &mut OptimState, lr: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::InvalidArgument("non-finite gradient, step refused".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    let g = grads.tensors();
    let (m, wd, decay_biases) = (state.momentum, state.weight_decay, state.decay_biases);
    let params = model.tensors_mut();
    if params.len() != g.len()
        || params.len() != state.buffers.len()
        || params.iter().zip(&g).zip(&state.buffers).any(|((p, g), v)| p.1.len() != g.len() || v.len() != g.len())
    {
        return Err(Error::Shape("gradient or momentum layout does not match the model".into()));
    }
    for (((kind, theta), g), v) in params.into_iter().zip(g).zip(&mut state.buffers) {
        let decay = if kind == ParamKind::Bias && !decay_biases { 0.0 } else { wd };
        for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = m * *vi + gi + decay * *t;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// Runs independent per-item jobs and returns their results in index order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync;
}

/// Runs every job on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Executor for Serial {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        (0..n).map(f).collect()
    }
}

/// Where the incremental driver keeps the model of each finished step.
pub trait CheckpointStore {
    fn save(&mut self, step: usize, checkpoint: &Checkpoint) -> Result<()>;
    fn load(&self, step: usize) -> Result<Checkpoint>;
}

/// Keeps encoded checkpoints in memory, so loading exercises the decoder.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    entries: BTreeMap<usize, Vec<u8>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }
}

impl CheckpointStore for MemoryStore {
    fn save(&mut self, step: usize, checkpoint: &Checkpoint) -> Result<()> {
        self.entries.insert(step, checkpoint.encode());
        Ok(())
    }

    fn load(&self, step: usize) -> Result<Checkpoint> {
        let bytes = self
            .entries
            .get(&step)
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint for step {step}")))?;
        Checkpoint::decode(bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum IncrementalMethod {
    /// Plain fine-tuning with cross-entropy.
    #[cfg_attr(feature = "serde", serde(rename = "ft"))]
    Ft,
    /// Cross-entropy plus standard distillation.
    #[cfg_attr(feature = "serde", serde(rename = "lwf"))]
    Lwf,
    /// Background-modeled cross-entropy and distillation, with the
    /// background-splitting classifier init.
    #[cfg_attr(feature = "serde", serde(rename = "mib"))]
    Mib,
}

impl IncrementalMethod {
    pub const ALL: [IncrementalMethod; 3] = [Self::Ft, Self::Lwf, Self::Mib];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ft => "FT",
            Self::Lwf => "LwF",
            Self::Mib => "MiB",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum WeakMethod {
    /// Partial cross-entropy on labeled pixels only.
    #[cfg_attr(feature = "serde", serde(rename = "pce"))]
    Pce,
    /// Partial cross-entropy plus the unlabeled-pixel term.
    #[cfg_attr(feature = "serde", serde(rename = "unl"))]
    Unl,
    /// Partial cross-entropy with unlabeled pixels pushed to the background.
    #[cfg_attr(feature = "serde", serde(rename = "pce_bkg"))]
    PceBkg,
}

impl WeakMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pce => "PCE",
            Self::Unl => "UNL",
            Self::PceBkg => "PCE+bkg",
        }
    }
}

/// Optimization hyperparameters shared by both drivers.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainParams {
    pub arch: Architecture,
    /// Epochs per learning step.
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate of the first step.
    pub lr_first: f64,
    /// Base learning rate of every later step.
    pub lr_later: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_biases: bool,
    /// Share of each step's scenes held out from training.
    pub holdout_fraction: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            epochs: 30,
            batch_size: 8,
            lr_first: 1e-2,
            lr_later: 1e-3,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_biases: false,
            holdout_fraction: 0.2,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!("epochs {} and batch size {} must be positive", self.epochs, self.batch_size));
        }
        if !(self.lr_first > 0.0 && self.lr_later > 0.0 && self.lr_power > 0.0) {
            return bad("learning rates and power must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout fraction {} must be in [0, 1)", self.holdout_fraction));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalConfig {
    pub schedule: StepSchedule,
    pub method: IncrementalMethod,
    pub train: TrainParams,
    /// Stamped into every checkpoint and checked when one is loaded.
    pub digest: ConfigDigest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakConfig {
    pub method: WeakMethod,
    pub mode: Mode,
    /// Channel layout of the model.
    pub classes: ClassSet,
    pub train: TrainParams,
    pub digest: ConfigDigest,
}

/// Scores of one model on one set of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub per_class_iou: Vec<(ClassId, Option<f64>)>,
    pub miou_all: Option<f64>,
    /// Classes of the first step, background included.
    pub miou_old: Option<f64>,
    /// Classes added after the first step.
    pub miou_new: Option<f64>,
    pub pixel_accuracy: f64,
    pub pixels: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub method: &'static str,
    pub classes: ClassSet,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub iterations: usize,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub holdout: Option<EvalSummary>,
    pub test: EvalSummary,
}

#[derive(Debug, Clone)]
pub struct IncrementalOutcome {
    pub reports: Vec<StepReport>,
    pub model: SegModel,
}

#[derive(Debug, Clone)]
pub struct WeakOutcome {
    pub report: StepReport,
    pub model: SegModel,
}

/// Maps truth outside `eval_classes` to the background, when there is one.
fn eval_truth(scene: &Scene, eval_classes: &ClassSet) -> Result<Vec<Label>> {
    let has_bg = eval_classes.contains(ClassId::BACKGROUND);
    scene
        .truth()
        .iter()
        .map(|&c| match (eval_classes.contains(c), has_bg) {
            (true, _) => Ok(Some(c)),
            (false, true) => Ok(Some(ClassId::BACKGROUND)),
            (false, false) => Err(Error::UnknownClass(c)),
        })
        .collect()
}

/// Confusion matrix of `model` on `scenes`, with truth classes the model
/// does not know yet counted as background.
pub fn evaluate<E: Executor>(model: &SegModel, scenes: &[Arc<Scene>], exec: &E) -> Result<ConfusionMatrix> {
    let layout = model.label_space();
    let parts = exec.map(scenes.len(), |i| -> Result<ConfusionMatrix> {
        let scene = &scenes[i];
        let mut cm = ConfusionMatrix::new(layout.clone())?;
        let pred = argmax_classes(&model.logits(scene.image())?, layout);
        cm.accumulate(&eval_truth(scene, layout)?, &pred)?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(layout.clone())?;
    for part in parts {
        total.merge(&part?)?;
    }
    Ok(total)
}

pub fn summarize(cm: &ConfusionMatrix, old_classes: &ClassSet) -> Result<EvalSummary> {
    let old = old_classes.intersection(cm.classes());
    let new = cm.classes().difference(&old);
    let groups = cm.grouped_miou(&[old, new])?;
    Ok(EvalSummary {
        per_class_iou: cm.classes().iter().zip(cm.iou_per_class()).collect(),
        miou_all: cm.mean_iou(),
        miou_old: groups[0],
        miou_new: groups[1],
        pixel_accuracy: cm.pixel_accuracy()?,
        pixels: cm.total(),
    })
}

/// Seeded split of sample indices into (train, holdout).
fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = math::round(n as f64 * fraction) as usize;
    let k = k.min(n.saturating_sub(1));
    let mut holdout = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    if train.is_empty() {
        return Err(Error::Empty("no training samples"));
    }
    holdout.sort_unstable();
    train.sort_unstable();
    Ok((train, holdout))
}

/// Sums per-image `(loss, gradient)` pairs in index order and averages.
fn reduce(parts: Vec<Result<(f64, ParamGrads)>>) -> Result<(f64, ParamGrads)> {
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or(Error::Empty("empty batch"))??;
    for part in iter {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g)?;
    }
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Trains `model` for the configured epochs on `samples[train]`. `loss`
/// maps (sample index, logits) to a loss report.
fn train_loop<E, L>(
    model: &mut SegModel,
    samples: &[Sample],
    train: &[usize],
    params: &TrainParams,
    base_lr: f64,
    seed: u64,
    exec: &E,
    loss: L,
) -> Result<(Vec<f64>, usize)>
where
    E: Executor,
    L: Fn(usize, &Grid) -> Result<LossReport> + Sync,
{
    let per_epoch = train.len().div_ceil(params.batch_size);
    let schedule = LrSchedule {
        base_lr,
        max_iterations: params.epochs * per_epoch,
        power: params.lr_power,
    };
    let mut optim = OptimState::new(model, params.momentum, params.weight_decay, params.decay_biases)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train.to_vec();
    let mut curve = Vec::with_capacity(params.epochs);
    let mut iteration = 0;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            let current: &SegModel = model;
            let parts = exec.map(batch.len(), |k| {
                let s = batch[k];
                let (logits, cache) = current.forward(samples[s].scene.image())?;
                let report = loss(s, &logits)?;
                let grads = current.backward(&cache, &report.grad_logits)?;
                Ok((report.value, grads))
            });
            let (value, grads) = reduce(parts)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { index: iteration, value });
            }
            epoch_loss += value * batch.len() as f64;
            let lr = lr_at(&schedule, iteration)?;
            sgd_step(model, &grads, &mut optim, lr)?;
            iteration += 1;
        }
        curve.push(epoch_loss / order.len() as f64);
    }
    Ok((curve, iteration))
}

/// Same as [`run_incremental_from`] starting at the first step.
pub fn run_incremental<E: Executor, S: CheckpointStore>(
    config: &IncrementalConfig,
    steps: &[StepDataset],
    test: &[Arc<Scene>],
    store: &mut S,
    exec: &E,
) -> Result<IncrementalOutcome> {
    run_incremental_from(config, steps, test, 0, store, exec)
}

/// Trains learning steps `start..`, loading the checkpoint of step
/// `start - 1` from `store` when `start > 0`. Every step saves its
/// checkpoint and is evaluated on its holdout and on `test`.
pub fn run_incremental_from<E: Executor, S: CheckpointStore>(
    config: &IncrementalConfig,
    steps: &[StepDataset],
    test: &[Arc<Scene>],
    start: usize,
    store: &mut S,
    exec: &E,
) -> Result<IncrementalOutcome> {
    let schedule = &config.schedule;
    let params = &config.train;
    params.validate()?;
    if steps.len() != schedule.num_steps() {
        return Err(Error::Schedule(format!(
            "{} datasets for a {}-step schedule",
            steps.len(),
            schedule.num_steps()
        )));
    }
    if start >= schedule.num_steps() {
        return Err(Error::StepOutOfRange {
            step: start,
            steps: schedule.num_steps(),
        });
    }
    if !schedule.background_present() {
        return Err(Error::Schedule("incremental runs need a background class".into()));
    }
    let first_classes = schedule.cumulative_labels(0)?;
    let mut reports = Vec::new();
    let mut model: Option<SegModel> = None;
    for t in start..schedule.num_steps() {
        let data = &steps[t];
        if data.step != t {
            return Err(Error::Schedule(format!("dataset {t} is labeled as step {}", data.step)));
        }
        let new_classes = schedule.step_classes(t)?;
        let allowed = new_classes.clone();
        for s in &data.samples {
            if !s.annotation.is_dense() || !s.annotation.label_set().is_subset(&allowed) {
                return Err(Error::InvalidArgument(format!(
                    "step {t} sample {} is not densely labeled within {allowed}",
                    s.scene_id
                )));
            }
        }
        let (train, holdout) = holdout_split(data.len(), params.holdout_fraction, derive_seed(params.seed, 300 + t as u64))?;
        let step_seed = derive_seed(params.seed, 200 + t as u64);
        let base_lr = if t == 0 { params.lr_first } else { params.lr_later };

        let (mut current, old) = if t == 0 {
            let m = SegModel::new(&params.arch, new_classes.clone(), derive_seed(params.seed, 0))?;
            (m, None)
        } else {
            let old = match model.take() {
                Some(m) => m,
                None => {
                    let ckpt = store.load(t - 1)?;
                    if ckpt.config_digest != config.digest {
                        return Err(Error::Checkpoint(format!(
                            "checkpoint of step {} was written under another config",
                            t - 1
                        )));
                    }
                    ckpt.model
                }
            };
            if old.label_space() != &schedule.cumulative_labels(t - 1)? {
                return Err(Error::Checkpoint(format!(
                    "checkpoint of step {} has label space {}",
                    t - 1,
                    old.label_space()
                )));
            }
            let strategy = match config.method {
                IncrementalMethod::Mib => InitStrategy::Mib,
                _ => InitStrategy::Random {
                    seed: derive_seed(params.seed, 100 + t as u64),
                },
            };
            (expand_head(&old, new_classes, strategy)?, Some(old))
        };
        let layout = current.label_space().clone();

        let (curve, iterations) = match &old {
            None => train_loop(&mut current, &data.samples, &train, params, base_lr, step_seed, exec, |s, z| {
                losses::ce_standard(z, &layout, &data.samples[s].annotation)
            })?,
            Some(old_model) => {
                let frozen = old_model.fingerprint();
                let old_classes = old_model.label_space();
                let cached: Vec<Option<ProbGrid>> = {
                    let mut slots: Vec<Option<ProbGrid>> = vec![None; data.len()];
                    let probs = exec.map(train.len(), |k| softmax(&old_model.logits(data.samples[train[k]].scene.image())?));
                    for (k, p) in probs.into_iter().enumerate() {
                        slots[train[k]] = Some(p?);
                    }
                    slots
                };
                let lambda = params.loss.lambda;
                let method = config.method;
                let out = train_loop(&mut current, &data.samples, &train, params, base_lr, step_seed, exec, |s, z| {
                    let ann = &data.samples[s].annotation;
                    let q_old = cached[s].as_ref().expect("cached for every training sample");
                    match method {
                        IncrementalMethod::Ft => losses::ce_standard(z, &layout, ann),
                        IncrementalMethod::Lwf => {
                            let ce = losses::ce_standard(z, &layout, ann)?;
                            if lambda == 0.0 {
                                return Ok(ce);
                            }
                            let kd = losses::kd_standard(z, &layout, q_old, old_classes)?;
                            ce.add_scaled(&kd, lambda)
                        }
                        IncrementalMethod::Mib => losses::objective_incremental(
                            z,
                            &layout,
                            ann,
                            Some(Distillation {
                                probs_old: q_old,
                                old_classes,
                                new_classes,
                            }),
                            &params.loss,
                        ),
                    }
                })?;
                if old_model.fingerprint() != frozen {
                    return Err(Error::FrozenModelChanged);
                }
                out
            }
        };

        store.save(
            t,
            &Checkpoint {
                model: current.clone(),
                step: t as u32,
                seed: params.seed,
                config_digest: config.digest,
            },
        )?;
        let holdout_scenes: Vec<Arc<Scene>> = holdout.iter().map(|&i| data.samples[i].scene.clone()).collect();
        let holdout_summary = if holdout_scenes.is_empty() {
            None
        } else {
            Some(summarize(&evaluate(&current, &holdout_scenes, exec)?, &first_classes)?)
        };
        let test_summary = summarize(&evaluate(&current, test, exec)?, &first_classes)?;
        reports.push(StepReport {
            step: t,
            method: config.method.name(),
            classes: layout,
            train_samples: train.len(),
            holdout_samples: holdout.len(),
            iterations,
            loss_curve: curve,
            holdout: holdout_summary,
            test: test_summary,
        });
        model = Some(current);
    }
    Ok(IncrementalOutcome {
        reports,
        model: model.expect("at least one step ran"),
    })
}

/// Trains one model on weakly annotated scenes and evaluates it against
/// full truth masks.
pub fn run_weak<E: Executor>(config: &WeakConfig, data: &StepDataset, test: &[Arc<Scene>], exec: &E) -> Result<WeakOutcome> {
    let params = &config.train;
    params.validate()?;
    let layout = &config.classes;
    let has_bg = layout.contains(ClassId::BACKGROUND);
    match config.mode {
        Mode::Object if !has_bg => {
            return Err(Error::InvalidArgument(format!("object-mode classes {layout} lack the background")))
        }
        Mode::Scene if has_bg => {
            return Err(Error::InvalidArgument(format!("scene-parsing classes {layout} include the background")))
        }
        _ => {}
    }
    if config.method == WeakMethod::PceBkg && config.mode == Mode::Scene {
        return Err(Error::InvalidArgument("the background fold needs a background class".into()));
    }
    if data.mode != config.mode {
        return Err(Error::InvalidArgument(format!(
            "data is {:?} but the run is configured for {:?}",
            data.mode, config.mode
        )));
    }
    for s in &data.samples {
        check_weak_annotation(&s.annotation, layout, config.mode, s.scene_id)?;
    }
    let (train, holdout) = holdout_split(data.len(), params.holdout_fraction, derive_seed(params.seed, 300))?;
    let mut model = SegModel::new(&params.arch, layout.clone(), derive_seed(params.seed, 0))?;
    let background = ClassSet::new([ClassId::BACKGROUND])?;
    let (curve, iterations) = train_loop(
        &mut model,
        &data.samples,
        &train,
        params,
        params.lr_first,
        derive_seed(params.seed, 200),
        exec,
        |s, z| {
            let ann = &data.samples[s].annotation;
            match config.method {
                WeakMethod::Pce => losses::pce(z, layout, ann, &PointWeights::Uniform),
                WeakMethod::Unl => losses::unl(z, layout, ann, &params.loss, config.mode),
                WeakMethod::PceBkg => losses::pce_with_unlabeled_fold(
                    z,
                    layout,
                    ann,
                    &PointWeights::Uniform,
                    &background,
                    params.loss.gamma,
                ),
            }
        },
    )?;
    let holdout_scenes: Vec<Arc<Scene>> = holdout.iter().map(|&i| data.samples[i].scene.clone()).collect();
    let holdout_summary = if holdout_scenes.is_empty() {
        None
    } else {
        Some(summarize(&evaluate(&model, &holdout_scenes, exec)?, layout)?)
    };
    let test_summary = summarize(&evaluate(&model, test, exec)?, layout)?;
    Ok(WeakOutcome {
        report: StepReport {
            step: 0,
            method: config.method.name(),
            classes: layout.clone(),
            train_samples: train.len(),
            holdout_samples: holdout.len(),
            iterations,
            loss_curve: curve,
            holdout: holdout_summary,
            test: test_summary,
        },
        model,
    })
}

fn check_weak_annotation(ann: &Annotation, layout: &ClassSet, mode: Mode, scene_id: usize) -> Result<()> {
    let labels = ann.label_set();
    if labels.is_empty() {
        return Err(Error::Empty("weak annotation with no labeled pixel"));
    }
    if mode == Mode::Scene && labels.contains(ClassId::BACKGROUND) {
        return Err(Error::InvalidArgument(format!(
            "scene-parsing annotation {scene_id} labels the background"
        )));
    }
    if !labels.is_subset(layout) {
        return Err(Error::InvalidArgument(format!(
            "annotation {scene_id} uses classes {labels} outside {layout}"
        )));
    }
    Ok(())
}
