//! Finite-difference checks of every loss gradient and of the model's
//! backward pass on seeded random instances.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::labelspace::{Annotation, ClassId, ClassSet, Mode};
use crate::losses::{self, Distillation, LossConfig, LossReport, PointWeights};
use crate::model::{Architecture, ParamKind, SegModel};
use crate::numerics::{compare_gradients, fd_gradient, softmax, GradComparison, Grid, ProbGrid, DEFAULT_FD_STEP};
use crate::synthdata::derive_seed;

/// Entries closer than this are treated as matching.
pub const ABS_FLOOR: f64 = 1e-8;
pub const LOSS_REL_TOL: f64 = 1e-5;
pub const MODEL_REL_TOL: f64 = 1e-4;

/// The losses covered by the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CeStandard,
    MibCe,
    KdStandard,
    MibKd,
    Pce,
    Unl,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        Self::CeStandard,
        Self::MibCe,
        Self::KdStandard,
        Self::MibKd,
        Self::Pce,
        Self::Unl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CeStandard => "ce_standard",
            Self::MibCe => "mib_ce",
            Self::KdStandard => "kd_standard",
            Self::MibKd => "mib_kd",
            Self::Pce => "pce",
            Self::Unl => "unl",
        }
    }
}

/// A random loss input: `H x W` pixels over classes `0..classes`, split
/// into old classes `{0, .., classes/2}` and new classes `{0, rest}`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub layout: ClassSet,
    pub old_classes: ClassSet,
    pub new_classes: ClassSet,
    pub logits: Grid,
    pub dense: Annotation,
    /// Roughly a third of the pixels labeled, from a few present classes.
    pub partial: Annotation,
    pub probs_old: ProbGrid,
}

impl Instance {
    pub fn random(seed: u64, height: usize, width: usize, classes: u8) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = height * width;
        let layout = ClassSet::new((0..classes).map(ClassId))?;
        let split = classes / 2 + 1;
        let old_classes = ClassSet::new((0..split).map(ClassId))?;
        let new_classes = ClassSet::new(core::iter::once(ClassId(0)).chain((split..classes).map(ClassId)))?;
        let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let logits = Grid::from_vec(height, width, classes as usize, normal(n * classes as usize))?;
        let old_logits = Grid::from_vec(height, width, split as usize, normal(n * split as usize))?;
        let probs_old = softmax(&old_logits)?;
        let labels: Vec<ClassId> = (0..n).map(|_| ClassId(rng.random_range(0..classes))).collect();
        let dense = Annotation::dense(height, width, &labels)?;
        // Weak labels come from the background plus one or two other
        // classes, so the unlabeled-pixel term is not constant.
        let mut present = alloc::vec![ClassId(0)];
        while present.len() < 1 + rng.random_range(1..=2usize).min(classes as usize - 1) {
            let c = ClassId(rng.random_range(1..classes));
            if !present.contains(&c) {
                present.push(c);
            }
        }
        let mut partial = Annotation::unlabeled(height, width);
        for i in 0..n {
            if rng.random_bool(1.0 / 3.0) {
                partial.set(i, Some(present[rng.random_range(0..present.len())]));
            }
        }
        if partial.num_labeled() == 0 {
            partial.set(0, Some(present[0]));
        }
        Ok(Self {
            layout,
            old_classes,
            new_classes,
            logits,
            dense,
            partial,
            probs_old,
        })
    }

    /// Evaluates `kind` at `logits` (same shape as `self.logits`).
    pub fn loss(&self, kind: LossKind, logits: &Grid) -> Result<LossReport> {
        match kind {
            LossKind::CeStandard => losses::ce_standard(logits, &self.layout, &self.dense),
            LossKind::MibCe => losses::mib_ce(logits, &self.layout, &self.dense, &self.old_classes),
            LossKind::KdStandard => losses::kd_standard(logits, &self.layout, &self.probs_old, &self.old_classes),
            LossKind::MibKd => {
                losses::mib_kd(logits, &self.layout, &self.probs_old, &self.old_classes, &self.new_classes)
            }
            LossKind::Pce => losses::pce(logits, &self.layout, &self.partial, &PointWeights::Uniform),
            LossKind::Unl => losses::unl(logits, &self.layout, &self.partial, &LossConfig::default(), Mode::Object),
        }
    }

    /// The combined incremental objective, exercising both terms at once.
    pub fn objective(&self, logits: &Grid) -> Result<LossReport> {
        losses::objective_incremental(
            logits,
            &self.layout,
            &self.dense,
            Some(Distillation {
                probs_old: &self.probs_old,
                old_classes: &self.old_classes,
                new_classes: &self.new_classes,
            }),
            &LossConfig::default(),
        )
    }
}

/// Compares the gradient reported by `f` at `point` with central finite
/// differences of its value.
pub fn check_gradient<F>(f: F, point: &Grid) -> Result<GradComparison>
where
    F: Fn(&Grid) -> Result<LossReport>,
{
    let analytic = f(point)?.grad_logits;
    let mut failure = None;
    let numeric = fd_gradient(
        |x| match f(x) {
            Ok(r) => r.value,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        point,
        DEFAULT_FD_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    compare_gradients(analytic.data(), numeric?.data(), ABS_FLOOR)
}

/// Worst comparison of one check over all its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub worst: GradComparison,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst.passes(self.tolerance)
    }
}

/// Every loss on `seeds` random `8 x 8 x 5` instances.
pub fn loss_suite(base_seed: u64, seeds: usize) -> Result<Vec<CheckResult>> {
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let mut worst: Option<GradComparison> = None;
            for s in 0..seeds {
                let inst = Instance::random(derive_seed(base_seed, s as u64), 8, 8, 5)?;
                let cmp = check_gradient(|z| inst.loss(kind, z), &inst.logits)?;
                match worst.as_mut() {
                    Some(w) => w.merge(&cmp),
                    None => worst = Some(cmp),
                }
            }
            Ok(CheckResult {
                name: kind.name().into(),
                instances: seeds,
                worst: worst.expect("at least one seed"),
                tolerance: LOSS_REL_TOL,
            })
        })
        .collect()
}

/// The micro model used for full-network checks: two conv layers with
/// eight features each, non-zero biases.
pub fn micro_model(seed: u64, classes: ClassSet) -> Result<SegModel> {
    let arch = Architecture {
        input_channels: 3,
        conv_channels: alloc::vec![8, 8],
    };
    let mut model = SegModel::new(&arch, classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    for (kind, t) in model.tensors_mut() {
        if kind == ParamKind::Bias {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
    Ok(model)
}

/// Every loss back-propagated through the micro model on an `8 x 8` image;
/// compares all parameter gradients with finite differences.
pub fn model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let inst = Instance::random(derive_seed(seed, 77), 8, 8, 5)?;
    let model = micro_model(seed, inst.layout.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 78));
    let image = Grid::from_vec(8, 8, 3, (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let (logits, cache) = model.forward(&image)?;
    let base = model.params_flat();
    let point = Grid::from_vec(base.len(), 1, 1, base)?;
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let report = inst.loss(kind, &logits)?;
            let analytic = model.backward(&cache, &report.grad_logits)?.flat();
            let mut probe = model.clone();
            let mut failure = None;
            let numeric = fd_gradient(
                |p| {
                    let out = probe
                        .set_params_flat(p.data())
                        .and_then(|_| probe.logits(&image))
                        .and_then(|z| inst.loss(kind, &z));
                    match out {
                        Ok(r) => r.value,
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    }
                },
                &point,
                DEFAULT_FD_STEP,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let worst = compare_gradients(&analytic, numeric?.data(), ABS_FLOOR)?;
            Ok(CheckResult {
                name: format!("model/{}", kind.name()),
                instances: 1,
                worst,
                tolerance: MODEL_REL_TOL,
            })
        })
        .collect()
}

/// The whole suite: losses on 20 seeds, then the micro model.
pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = loss_suite(seed, 20)?;
    out.extend(model_suite(seed)?);
    Ok(out)
}
