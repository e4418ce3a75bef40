//! Procedural scenes with exact ground truth, the incremental data splits
//! and the weak-annotation samplers.
//!
//! Object scenes place up to a few non-overlapping colored shapes on a
//! muted gradient background. Scene-parsing scenes tile the canvas with a
//! Voronoi partition so every pixel carries a class.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labelspace::{Annotation, ClassId, ClassSet, Label, Mode, StepSchedule};
use crate::math;
use crate::numerics::Grid;

/// Deterministic per-item seed from a base seed and a stream index
/// (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub mode: Mode,
    /// Classes that may be rendered; never the background.
    pub classes: ClassSet,
    /// Object mode: number of shapes drawn uniformly from `1..=max_objects`.
    pub max_objects: usize,
    /// Scene mode: number of Voronoi sites drawn from this inclusive range.
    pub min_regions: usize,
    pub max_regions: usize,
    pub noise_std: f64,
}

impl SceneParams {
    pub fn object_default() -> Self {
        Self {
            height: 64,
            width: 64,
            mode: Mode::Object,
            classes: ClassSet::new((1..=6).map(ClassId)).expect("valid ids"),
            max_objects: 4,
            min_regions: 3,
            max_regions: 6,
            noise_std: 0.05,
        }
    }

    pub fn scene_default() -> Self {
        Self {
            mode: Mode::Scene,
            classes: ClassSet::new((1..=8).map(ClassId)).expect("valid ids"),
            ..Self::object_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Generation(msg.into()));
        if self.classes.is_empty() {
            return bad("no renderable class");
        }
        if self.classes.contains(ClassId::BACKGROUND) {
            return bad("the background cannot be rendered as a shape or region");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise std must be finite and non-negative");
        }
        match self.mode {
            Mode::Object => {
                if self.max_objects == 0 {
                    return bad("max_objects must be at least 1");
                }
                if self.height.min(self.width) < 8 {
                    return Err(Error::Generation(format!(
                        "canvas {}x{} too small to place shapes",
                        self.height, self.width
                    )));
                }
            }
            Mode::Scene => {
                if self.min_regions == 0 || self.min_regions > self.max_regions {
                    return bad("region range must satisfy 1 <= min <= max");
                }
                if self.height * self.width < self.max_regions {
                    return bad("canvas smaller than the number of regions");
                }
            }
        }
        Ok(())
    }
}

/// A connected group of pixels of one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub class: ClassId,
    pub pixels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    mode: Mode,
    image: Grid,
    truth: Vec<ClassId>,
    instances: Vec<Instance>,
}

impl Scene {
    /// Rebuilds a scene from an image and its full truth mask; instances are
    /// the 4-connected components of each non-background class.
    pub fn from_parts(image: Grid, truth: Vec<ClassId>, mode: Mode) -> Result<Self> {
        if truth.len() != image.pixels() {
            return Err(Error::Shape(format!(
                "truth has {} pixels, image {}",
                truth.len(),
                image.pixels()
            )));
        }
        if image.channels() != 3 {
            return Err(Error::Shape(format!("scene image has {} channels", image.channels())));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("scene image values outside [0, 1]".into()));
        }
        if mode == Mode::Scene && truth.iter().any(|c| c.is_background()) {
            return Err(Error::InvalidArgument("scene-parsing truth contains the background".into()));
        }
        if let Some(c) = truth.iter().find(|c| c.0 == crate::labelspace::UNLABELED_CODE) {
            return Err(Error::UnknownClass(*c));
        }
        let instances = components(&truth, image.height(), image.width());
        Ok(Self {
            mode,
            image,
            truth,
            instances,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn image(&self) -> &Grid {
        &self.image
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn truth(&self) -> &[ClassId] {
        &self.truth
    }

    pub fn truth_labels(&self) -> Vec<Label> {
        self.truth.iter().map(|&c| Some(c)).collect()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    /// Distinct truth classes, background included when present.
    pub fn classes(&self) -> ClassSet {
        ClassSet::new(self.truth.iter().copied()).expect("valid ids")
    }

    pub fn background_fraction(&self) -> f64 {
        self.truth.iter().filter(|c| c.is_background()).count() as f64 / self.truth.len() as f64
    }
}

fn components(truth: &[ClassId], height: usize, width: usize) -> Vec<Instance> {
    let mut seen = vec![false; truth.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..truth.len() {
        let class = truth[start];
        if seen[start] || class.is_background() {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            for q in neighbors4(p, height, width).into_iter().flatten() {
                if !seen[q] && truth[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        pixels.sort_unstable();
        out.push(Instance { class, pixels });
    }
    out
}

fn neighbors4(p: usize, height: usize, width: usize) -> [Option<usize>; 4] {
    let (r, c) = (p / width, p % width);
    [
        (r > 0).then(|| p - width),
        (r + 1 < height).then(|| p + width),
        (c > 0).then(|| p - 1),
        (c + 1 < width).then(|| p + 1),
    ]
}

/// Base RGB color of a class: a fixed saturated palette for the first eight
/// ids, golden-ratio hues after that.
pub fn class_color(class: ClassId) -> [f64; 3] {
    const TABLE: [[f64; 3]; 8] = [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.15],
        [0.10, 0.20, 0.90],
        [0.92, 0.85, 0.10],
        [0.85, 0.10, 0.85],
        [0.10, 0.85, 0.85],
        [0.98, 0.50, 0.05],
        [0.45, 0.10, 0.70],
    ];
    let k = class.index().saturating_sub(1);
    if k < TABLE.len() {
        return TABLE[k];
    }
    let hue = (k as f64 * 0.618_033_988_749_895) % 1.0;
    hsv(hue, 0.85, 0.9)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0) as usize % 6;
    let f = h * 6.0 - (h * 6.0) as usize as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Bar,
}

impl ShapeKind {
    fn for_class(class: ClassId) -> Self {
        match class.index().saturating_sub(1) % 5 {
            0 => Self::Circle,
            1 => Self::Square,
            2 => Self::Triangle,
            3 => Self::Cross,
            _ => Self::Bar,
        }
    }

    /// Whether offset `(dy, dx)` from the center lies inside a shape of
    /// half-extent `r`. Every kind contains its center and leaves some of its
    /// bounding box uncovered.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Self::Circle => dy * dy + dx * dx <= r * r,
            Self::Square => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
            Self::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Self::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            Self::Bar => dx.abs() <= r && dy.abs() <= r / 3.0,
        }
    }
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.height, params.width);
    let mut image = Grid::zeros(h, w, 3);
    let mut truth = vec![ClassId::BACKGROUND; h * w];
    let palette = params.classes.as_slice();
    match params.mode {
        Mode::Object => {
            paint_background(&mut image, &mut rng);
            let count = rng.random_range(1..=params.max_objects);
            let short = h.min(w) as f64;
            let (r_lo, r_hi) = ((short / 10.0).max(2.0), (short / 5.0).max(3.0));
            let mut boxes: Vec<(isize, isize, isize, isize)> = Vec::new();
            for _ in 0..count {
                let class = palette[rng.random_range(0..palette.len())];
                let r = rng.random_range(r_lo..r_hi);
                let ri = math::ceil(r) as isize;
                let mut placed = None;
                for _ in 0..64 {
                    let cy = rng.random_range(ri as i64..(h as i64 - ri as i64).max(ri as i64 + 1)) as isize;
                    let cx = rng.random_range(ri as i64..(w as i64 - ri as i64).max(ri as i64 + 1)) as isize;
                    let bb = (cy - ri, cx - ri, cy + ri, cx + ri);
                    let clear = boxes.iter().all(|o| {
                        bb.0 > o.2 + 1 || o.0 > bb.2 + 1 || bb.1 > o.3 + 1 || o.1 > bb.3 + 1
                    });
                    if clear {
                        placed = Some((cy, cx, bb));
                        break;
                    }
                }
                let Some((cy, cx, bb)) = placed else { continue };
                boxes.push(bb);
                let kind = ShapeKind::for_class(class);
                let color = class_color(class);
                for y in bb.0.max(0)..=bb.2.min(h as isize - 1) {
                    for x in bb.1.max(0)..=bb.3.min(w as isize - 1) {
                        if kind.contains((y - cy) as f64, (x - cx) as f64, r) {
                            let p = y as usize * w + x as usize;
                            truth[p] = class;
                            image.pixel_mut(p).copy_from_slice(&color);
                        }
                    }
                }
            }
            if boxes.is_empty() {
                return Err(Error::Generation(format!("could not place any shape on a {h}x{w} canvas")));
            }
        }
        Mode::Scene => {
            let n = rng.random_range(params.min_regions..=params.max_regions);
            let sites: Vec<(f64, f64, ClassId, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.0..h as f64),
                        rng.random_range(0.0..w as f64),
                        palette[rng.random_range(0..palette.len())],
                        rng.random_range(0.8..1.0),
                    )
                })
                .collect();
            for p in 0..h * w {
                let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (k, s) in sites.iter().enumerate() {
                    let d = (s.0 - y) * (s.0 - y) + (s.1 - x) * (s.1 - x);
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                let (_, _, class, shade) = sites[best];
                truth[p] = class;
                let color = class_color(class);
                for (v, c) in image.pixel_mut(p).iter_mut().zip(color) {
                    *v = c * shade;
                }
            }
        }
    }
    if params.noise_std > 0.0 {
        let noise = Normal::new(0.0, params.noise_std).map_err(|e| Error::Generation(format!("{e}")))?;
        for v in image.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Scene::from_parts(image, truth, params.mode)
}

/// Low-saturation gray with a slow sinusoidal drift per channel.
fn paint_background(image: &mut Grid, rng: &mut ChaCha8Rng) {
    let (h, w) = (image.height(), image.width());
    let base: f64 = rng.random_range(0.35..0.55);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..core::f64::consts::TAU),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
            )
        })
        .collect();
    for p in 0..h * w {
        let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
        for (ch, v) in image.pixel_mut(p).iter_mut().enumerate() {
            let (phase, fy, fx) = waves[ch];
            *v = base + 0.1 * math::sin(core::f64::consts::TAU * (fy * y + fx * x) / 2.0 + phase);
        }
    }
}

/// `count` scenes with seeds derived from `base_seed`.
pub fn generate_scenes(base_seed: u64, count: usize, params: &SceneParams) -> Result<Vec<Arc<Scene>>> {
    (0..count)
        .map(|i| generate_scene(derive_seed(base_seed, i as u64), params).map(Arc::new))
        .collect()
}

/// One training example of a learning step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index of the scene in the pool it was drawn from.
    pub scene_id: usize,
    pub scene: Arc<Scene>,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDataset {
    pub step: usize,
    pub mode: Mode,
    pub samples: Vec<Sample>,
}

impl StepDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Scenes left out of a split and why.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub background_only: usize,
    pub outside_schedule: usize,
}

/// Keeps labels of `keep` and maps every other pixel to the background.
fn relabel(scene: &Scene, keep: &ClassSet) -> Annotation {
    let labels = scene
        .truth
        .iter()
        .map(|&c| Some(if keep.contains(c) { c } else { ClassId::BACKGROUND }))
        .collect();
    Annotation::new(scene.height(), scene.width(), labels).expect("shape matches scene")
}

fn check_incremental(scenes: &[Arc<Scene>], schedule: &StepSchedule) -> Result<()> {
    if !schedule.background_present() {
        return Err(Error::Schedule("incremental splits need a background class".into()));
    }
    if let Some(s) = scenes.iter().find(|s| s.mode != Mode::Object) {
        return Err(Error::InvalidArgument(format!(
            "incremental splits need object scenes, got {:?}",
            s.mode
        )));
    }
    Ok(())
}

/// Each scene goes to the first step whose cumulative label set covers all
/// its classes. There it keeps labels for that step's new classes only.
pub fn split_disjoint(scenes: &[Arc<Scene>], schedule: &StepSchedule) -> Result<(Vec<StepDataset>, SplitReport)> {
    check_incremental(scenes, schedule)?;
    let cumulative: Vec<ClassSet> = (0..schedule.num_steps())
        .map(|t| schedule.cumulative_labels(t))
        .collect::<Result<_>>()?;
    let mut out: Vec<StepDataset> = (0..schedule.num_steps())
        .map(|step| StepDataset {
            step,
            mode: Mode::Object,
            samples: Vec::new(),
        })
        .collect();
    let mut report = SplitReport::default();
    for (id, scene) in scenes.iter().enumerate() {
        let classes = scene.classes();
        if classes.without_background().is_empty() {
            report.background_only += 1;
            continue;
        }
        let Some(t) = cumulative.iter().position(|y| classes.is_subset(y)) else {
            report.outside_schedule += 1;
            continue;
        };
        let keep = schedule.step_classes(t)?.without_background();
        out[t].samples.push(Sample {
            scene_id: id,
            scene: scene.clone(),
            annotation: relabel(scene, &keep),
        });
    }
    Ok((out, report))
}

/// Step `t` takes every scene with at least one pixel of a class new at
/// `t`; only those classes keep their labels.
pub fn split_overlapped(scenes: &[Arc<Scene>], schedule: &StepSchedule) -> Result<Vec<StepDataset>> {
    check_incremental(scenes, schedule)?;
    (0..schedule.num_steps())
        .map(|t| {
            let keep = schedule.step_classes(t)?.without_background();
            let samples = scenes
                .iter()
                .enumerate()
                .filter(|(_, s)| s.truth.iter().any(|&c| keep.contains(c)))
                .map(|(id, s)| Sample {
                    scene_id: id,
                    scene: s.clone(),
                    annotation: relabel(s, &keep),
                })
                .collect();
            Ok(StepDataset {
                step: t,
                mode: Mode::Object,
                samples,
            })
        })
        .collect()
}

/// Rejects splits where some step has fewer than `min` samples.
pub fn check_min_samples(steps: &[StepDataset], min: usize) -> Result<()> {
    for s in steps {
        if s.len() < min {
            return Err(Error::Generation(format!(
                "step {} has {} scenes, at least {min} required",
                s.step,
                s.len()
            )));
        }
    }
    Ok(())
}

/// One labeled pixel drawn uniformly inside each instance. Object scenes
/// get no background point.
pub fn annotate_points<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Result<Annotation> {
    if scene.instances.is_empty() {
        return Err(Error::Empty("scene has no instance to annotate"));
    }
    let mut ann = Annotation::unlabeled(scene.height(), scene.width());
    for inst in &scene.instances {
        let p = inst.pixels[rng.random_range(0..inst.pixels.len())];
        ann.set(p, Some(inst.class));
    }
    Ok(ann)
}

/// Per instance a self-avoiding 4-connected walk of up to `length` pixels
/// inside the instance, plus one walk over background pixels. With
/// `length == 1` the instance pixels coincide with [`annotate_points`] for
/// the same RNG state.
pub fn annotate_scribbles<R: Rng + ?Sized>(scene: &Scene, rng: &mut R, length: usize) -> Result<Annotation> {
    if scene.mode != Mode::Object {
        return Err(Error::InvalidArgument("scribbles need an object scene".into()));
    }
    if length == 0 {
        return Err(Error::InvalidArgument("scribble length must be at least 1".into()));
    }
    if scene.instances.is_empty() {
        return Err(Error::Empty("scene has no instance to annotate"));
    }
    let (h, w) = (scene.height(), scene.width());
    let mut ann = Annotation::unlabeled(h, w);
    let mut visited = vec![false; h * w];
    let starts: Vec<usize> = scene
        .instances
        .iter()
        .map(|inst| inst.pixels[rng.random_range(0..inst.pixels.len())])
        .collect();
    for (inst, &start) in scene.instances.iter().zip(&starts) {
        for p in walk(start, length, h, w, |q| scene.truth[q] == inst.class, &mut visited, rng) {
            ann.set(p, Some(inst.class));
        }
    }
    let background: Vec<usize> = (0..h * w).filter(|&p| scene.truth[p].is_background()).collect();
    if background.is_empty() {
        return Err(Error::Empty("object scene without background pixels"));
    }
    let start = background[rng.random_range(0..background.len())];
    for p in walk(start, length, h, w, |q| scene.truth[q].is_background(), &mut visited, rng) {
        ann.set(p, Some(ClassId::BACKGROUND));
    }
    Ok(ann)
}

/// Random self-avoiding walk that backtracks along its own path when it
/// gets stuck; stops after `length` distinct pixels or when its connected
/// region is exhausted.
fn walk<R: Rng + ?Sized>(
    start: usize,
    length: usize,
    height: usize,
    width: usize,
    inside: impl Fn(usize) -> bool,
    visited: &mut [bool],
    rng: &mut R,
) -> Vec<usize> {
    let mut path = vec![start];
    let mut out = vec![start];
    visited[start] = true;
    while out.len() < length {
        let Some(&cur) = path.last() else { break };
        let mut options = [0usize; 4];
        let mut n = 0;
        for q in neighbors4(cur, height, width).into_iter().flatten() {
            if !visited[q] && inside(q) {
                options[n] = q;
                n += 1;
            }
        }
        if n == 0 {
            path.pop();
            continue;
        }
        let next = options[rng.random_range(0..n)];
        visited[next] = true;
        path.push(next);
        out.push(next);
    }
    out
}

/// Kind of weak annotation to draw for every scene of a pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum WeakKind {
    Points,
    Scribbles,
    Dense,
}

/// Annotates every scene with a per-scene RNG derived from `seed`.
pub fn annotate_pool(scenes: &[Arc<Scene>], kind: WeakKind, scribble_length: usize, seed: u64) -> Result<StepDataset> {
    let mode = scenes.first().map_or(Mode::Object, |s| s.mode);
    if scenes.iter().any(|s| s.mode != mode) {
        return Err(Error::InvalidArgument("pool mixes object and scene modes".into()));
    }
    let samples = scenes
        .iter()
        .enumerate()
        .map(|(id, scene)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, id as u64));
            let annotation = match kind {
                WeakKind::Points => annotate_points(scene, &mut rng)?,
                WeakKind::Scribbles => annotate_scribbles(scene, &mut rng, scribble_length)?,
                WeakKind::Dense => Annotation::dense(scene.height(), scene.width(), &scene.truth)?,
            };
            Ok(Sample {
                scene_id: id,
                scene: scene.clone(),
                annotation,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StepDataset { step: 0, mode, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_object(classes: &[u8]) -> SceneParams {
        SceneParams {
            height: 24,
            width: 24,
            classes: ClassSet::from_ids(classes).unwrap(),
            ..SceneParams::object_default()
        }
    }

    fn mask_scene(h: usize, w: usize, truth: &[u8]) -> Arc<Scene> {
        let image = Grid::zeros(h, w, 3);
        let truth = truth.iter().map(|&c| ClassId(c)).collect();
        Arc::new(Scene::from_parts(image, truth, Mode::Object).unwrap())
    }

    #[test]
    fn object_scene_is_deterministic_and_consistent() {
        let params = SceneParams::object_default();
        let a = generate_scene(42, &params).unwrap();
        let b = generate_scene(42, &params).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(43, &params).unwrap());
        assert!(a.background_fraction() > 0.0);
        assert!((1..=4).contains(&a.instances().len()));
        assert!(a.image().data().iter().all(|v| (0.0..=1.0).contains(v)));
        for inst in a.instances() {
            assert!(!inst.pixels.is_empty());
            assert!(inst.pixels.iter().all(|&p| a.truth()[p] == inst.class));
        }
    }

    #[test]
    fn scene_mode_has_no_background() {
        let params = SceneParams::scene_default();
        for seed in 0..10 {
            let s = generate_scene(seed, &params).unwrap();
            assert!(s.truth().iter().all(|c| !c.is_background()));
            let covered: usize = s.instances().iter().map(|i| i.pixels.len()).sum();
            assert_eq!(covered, s.truth().len());
        }
    }

    #[test]
    fn too_small_canvas_is_rejected() {
        let params = SceneParams {
            height: 5,
            width: 40,
            ..SceneParams::object_default()
        };
        assert!(matches!(generate_scene(1, &params), Err(Error::Generation(_))));
    }

    #[test]
    fn disjoint_rule_examples() {
        let schedule = StepSchedule::new(
            vec![ClassSet::from_ids(&[0, 1]).unwrap(), ClassSet::from_ids(&[0, 2]).unwrap()],
            true,
        )
        .unwrap();
        let scenes = vec![
            mask_scene(1, 4, &[0, 1, 1, 0]),
            mask_scene(1, 4, &[1, 0, 2, 0]),
            mask_scene(1, 4, &[0, 0, 0, 0]),
            mask_scene(1, 4, &[3, 0, 1, 0]),
        ];
        let (steps, report) = split_disjoint(&scenes, &schedule).unwrap();
        assert_eq!(steps[0].samples.len(), 1);
        assert_eq!(steps[0].samples[0].scene_id, 0);
        assert_eq!(steps[0].samples[0].annotation.to_codes(), vec![0, 1, 1, 0]);
        assert_eq!(steps[1].samples.len(), 1);
        assert_eq!(steps[1].samples[0].annotation.to_codes(), vec![0, 0, 2, 0]);
        assert_eq!(
            report,
            SplitReport {
                background_only: 1,
                outside_schedule: 1
            }
        );
    }

    #[test]
    fn overlapped_rule_examples() {
        let schedule = StepSchedule::new(
            vec![ClassSet::from_ids(&[0, 1]).unwrap(), ClassSet::from_ids(&[0, 2]).unwrap()],
            true,
        )
        .unwrap();
        let scenes = vec![mask_scene(1, 4, &[1, 0, 2, 0]), mask_scene(1, 4, &[0, 0, 0, 0])];
        let steps = split_overlapped(&scenes, &schedule).unwrap();
        assert_eq!(steps[0].samples.len(), 1);
        assert_eq!(steps[1].samples.len(), 1);
        assert_eq!(steps[0].samples[0].annotation.to_codes(), vec![1, 0, 0, 0]);
        assert_eq!(steps[1].samples[0].annotation.to_codes(), vec![0, 0, 2, 0]);
    }

    #[test]
    fn splits_on_generated_pool() {
        let schedule = StepSchedule::parse("2-1-1", true).unwrap();
        let scenes = generate_scenes(5, 60, &small_object(&[1, 2, 3, 4])).unwrap();
        let (steps, report) = split_disjoint(&scenes, &schedule).unwrap();
        let mut ids: Vec<usize> = steps.iter().flat_map(|s| s.samples.iter().map(|x| x.scene_id)).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(n + report.background_only + report.outside_schedule, 60);
        for (t, step) in steps.iter().enumerate() {
            let y = schedule.cumulative_labels(t).unwrap();
            let new = schedule.step_classes(t).unwrap().without_background();
            for s in &step.samples {
                assert!(s.scene.classes().is_subset(&y));
                assert!(s.annotation.label_set().is_subset(&new.union(&ClassSet::from_ids(&[0]).unwrap())));
            }
        }
        assert!(check_min_samples(&steps, 1).is_ok());
        assert!(check_min_samples(&steps, 1000).is_err());

        let over = split_overlapped(&scenes, &schedule).unwrap();
        for (t, step) in over.iter().enumerate() {
            let new = schedule.step_classes(t).unwrap().without_background();
            assert!(step.samples.iter().all(|s| !s.scene.classes().intersection(&new).is_empty()));
        }
        let covered: usize = scenes
            .iter()
            .enumerate()
            .filter(|(i, _)| over.iter().any(|st| st.samples.iter().any(|s| s.scene_id == *i)))
            .count();
        let eligible = scenes.iter().filter(|s| !s.classes().without_background().is_empty()).count();
        assert_eq!(covered, eligible);
    }

    #[test]
    fn points_one_per_instance_inside_truth() {
        let params = SceneParams::object_default();
        for seed in 0..20 {
            let scene = generate_scene(seed, &params).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ann = annotate_points(&scene, &mut rng).unwrap();
            assert_eq!(ann.num_labeled(), scene.instances().len());
            for inst in scene.instances() {
                let labeled: Vec<usize> = inst.pixels.iter().copied().filter(|&p| ann.get(p).is_some()).collect();
                assert_eq!(labeled.len(), 1);
                assert_eq!(ann.get(labeled[0]), Some(inst.class));
            }
            assert!(ann.labels().iter().flatten().all(|c| !c.is_background()));
        }
        let scene = generate_scene(3, &SceneParams::scene_default()).unwrap();
        let ann = annotate_points(&scene, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ann.num_labeled(), scene.instances().len());
    }

    #[test]
    fn scribbles_follow_truth_and_degenerate_to_points() {
        let params = SceneParams::object_default();
        for seed in 0..20 {
            let scene = generate_scene(seed, &params).unwrap();
            let ann = annotate_scribbles(&scene, &mut ChaCha8Rng::seed_from_u64(seed), 12).unwrap();
            for p in ann.labeled_indices() {
                assert_eq!(ann.get(p), Some(scene.truth()[p]));
            }
            assert!(ann.labels().iter().flatten().any(|c| c.is_background()));
            for inst in scene.instances() {
                let n = inst.pixels.iter().filter(|&&p| ann.get(p).is_some()).count();
                assert_eq!(n, inst.pixels.len().min(12));
            }

            let points = annotate_points(&scene, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let single = annotate_scribbles(&scene, &mut ChaCha8Rng::seed_from_u64(seed), 1).unwrap();
            let bg: Vec<usize> = single
                .labeled_indices()
                .into_iter()
                .filter(|&p| single.get(p) == Some(ClassId::BACKGROUND))
                .collect();
            assert_eq!(bg.len(), 1);
            let mut stripped = single.clone();
            stripped.set(bg[0], None);
            assert_eq!(stripped, points);
        }
        let scene = generate_scene(1, &SceneParams::scene_default()).unwrap();
        assert!(annotate_scribbles(&scene, &mut ChaCha8Rng::seed_from_u64(0), 4).is_err());
    }

    #[test]
    fn scribble_walk_is_contiguous() {
        let scene = generate_scene(9, &SceneParams::object_default()).unwrap();
        let (h, w) = (scene.height(), scene.width());
        let mut visited = vec![false; h * w];
        let inst = &scene.instances()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let path = walk(inst.pixels[0], 12, h, w, |q| scene.truth()[q] == inst.class, &mut visited, &mut rng);
        for (k, &p) in path.iter().enumerate().skip(1) {
            assert!(path[..k]
                .iter()
                .any(|&q| neighbors4(p, h, w).contains(&Some(q))));
        }
    }

    #[test]
    fn pools_are_deterministic() {
        let scenes = generate_scenes(3, 8, &small_object(&[1, 2, 3])).unwrap();
        let a = annotate_pool(&scenes, WeakKind::Scribbles, 12, 4).unwrap();
        let b = annotate_pool(&generate_scenes(3, 8, &small_object(&[1, 2, 3])).unwrap(), WeakKind::Scribbles, 12, 4).unwrap();
        assert_eq!(a, b);
        let dense = annotate_pool(&scenes, WeakKind::Dense, 12, 4).unwrap();
        assert!(dense.samples.iter().all(|s| s.annotation.is_dense()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn generated_scenes_satisfy_invariants(seed in any::<u64>(), scene_mode in any::<bool>()) {
            let params = if scene_mode { SceneParams { height: 20, width: 20, ..SceneParams::scene_default() } } else { small_object(&[1, 2, 3, 4, 5, 6]) };
            let s = generate_scene(seed, &params).unwrap();
            let mut seen = vec![false; s.truth().len()];
            for inst in s.instances() {
                prop_assert!(!inst.pixels.is_empty());
                for &p in &inst.pixels {
                    prop_assert!(!seen[p]);
                    seen[p] = true;
                    prop_assert_eq!(s.truth()[p], inst.class);
                }
            }
            for (p, c) in s.truth().iter().enumerate() {
                prop_assert_eq!(seen[p], !c.is_background());
            }
            prop_assert!(s.classes().without_background().is_subset(&params.classes));
        }
    }
}
