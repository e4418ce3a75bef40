//! Class identifiers, per-step class sets and cumulative label spaces.
//!
//! The background class is always id 0. Unlabeled pixels are `None` in memory
//! and [`UNLABELED_CODE`] (255) on disk; that code is never a valid class id,
//! so it can never become a softmax channel.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Serialized value of an unlabeled pixel.
pub const UNLABELED_CODE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct ClassId(pub u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    #[inline]
    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A pixel label: a class, or `None` for the unlabeled marker.
pub type Label = Option<ClassId>;

/// Object segmentation has a background class that every image contains;
/// scene parsing labels every pixel with a semantic class and has none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Mode {
    Object,
    Scene,
}

/// A sorted set of class ids. Doubles as a channel layout: channel `k` of a
/// grid described by this set holds class `set.as_slice()[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<ClassId>", into = "Vec<ClassId>"))]
pub struct ClassSet(Vec<ClassId>);

impl TryFrom<Vec<ClassId>> for ClassSet {
    type Error = Error;

    fn try_from(ids: Vec<ClassId>) -> Result<Self> {
        let n = ids.len();
        let set = Self::new(ids)?;
        if set.len() != n {
            return Err(Error::InvalidArgument("duplicate class ids".into()));
        }
        Ok(set)
    }
}

impl From<ClassSet> for Vec<ClassId> {
    fn from(set: ClassSet) -> Self {
        set.0
    }
}

impl ClassSet {
    pub fn new<I: IntoIterator<Item = ClassId>>(classes: I) -> Result<Self> {
        let mut ids: Vec<ClassId> = classes.into_iter().collect();
        if let Some(bad) = ids.iter().find(|c| c.0 == UNLABELED_CODE) {
            return Err(Error::UnknownClass(*bad));
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(Self(ids))
    }

    /// Convenience constructor from raw ids.
    pub fn from_ids(ids: &[u8]) -> Result<Self> {
        Self::new(ids.iter().map(|&i| ClassId(i)))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn contains(&self, class: ClassId) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    /// Channel index of `class` in this layout.
    #[inline]
    pub fn position(&self, class: ClassId) -> Option<usize> {
        self.0.binary_search(&class).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.0.iter().copied()
    }

    #[inline]
    pub fn as_slice(&self) -> &[ClassId] {
        &self.0
    }

    pub fn insert(&mut self, class: ClassId) {
        if let Err(at) = self.0.binary_search(&class) {
            self.0.insert(at, class);
        }
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        let mut out = self.clone();
        for c in other.iter() {
            out.insert(c);
        }
        out
    }

    pub fn difference(&self, other: &ClassSet) -> ClassSet {
        Self(self.iter().filter(|c| !other.contains(*c)).collect())
    }

    pub fn intersection(&self, other: &ClassSet) -> ClassSet {
        Self(self.iter().filter(|c| other.contains(*c)).collect())
    }

    pub fn is_subset(&self, other: &ClassSet) -> bool {
        self.iter().all(|c| other.contains(c))
    }

    pub fn without_background(&self) -> ClassSet {
        Self(self.iter().filter(|c| !c.is_background()).collect())
    }
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        f.write_str("}")
    }
}

/// The incremental label universe: class sets `C^0, C^1, ...` learned one
/// step at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    steps: Vec<ClassSet>,
    background_present: bool,
}

impl StepSchedule {
    pub fn new(steps: Vec<ClassSet>, background_present: bool) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Schedule("schedule has no steps".into()));
        }
        for (t, set) in steps.iter().enumerate() {
            if background_present && !set.contains(ClassId::BACKGROUND) {
                return Err(Error::Schedule(format!("step {t} is missing the background class")));
            }
            if !background_present && set.contains(ClassId::BACKGROUND) {
                return Err(Error::Schedule(format!(
                    "step {t} contains class 0 but the schedule has no background"
                )));
            }
            if set.without_background().is_empty() {
                return Err(Error::Schedule(format!("step {t} introduces no class")));
            }
        }
        for s in 0..steps.len() {
            for t in s + 1..steps.len() {
                let shared = steps[s].intersection(&steps[t]).without_background();
                if !shared.is_empty() {
                    return Err(Error::Schedule(format!(
                        "steps {s} and {t} share classes {shared}"
                    )));
                }
            }
        }
        Ok(Self {
            steps,
            background_present,
        })
    }

    /// Parses the `"15-5"` / `"4-1-1"` notation: the first number is the
    /// size of the initial step, each further number a later step. Classes
    /// are numbered from 1; with a background, every step also holds id 0.
    pub fn parse(notation: &str, background_present: bool) -> Result<Self> {
        let mut steps = Vec::new();
        let mut next: u32 = 1;
        for part in notation.split('-') {
            let n: u32 = part
                .trim()
                .parse()
                .map_err(|_| Error::Schedule(format!("bad step size {part:?} in {notation:?}")))?;
            if n == 0 {
                return Err(Error::Schedule(format!("zero-sized step in {notation:?}")));
            }
            if next + n > u32::from(UNLABELED_CODE) {
                return Err(Error::Schedule(format!("{notation:?} needs too many classes")));
            }
            let mut ids: Vec<ClassId> = (next..next + n).map(|i| ClassId(i as u8)).collect();
            if background_present {
                ids.push(ClassId::BACKGROUND);
            }
            steps.push(ClassSet::new(ids)?);
            next += n;
        }
        Self::new(steps, background_present)
    }

    #[inline]
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    #[inline]
    pub fn background_present(&self) -> bool {
        self.background_present
    }

    pub fn steps(&self) -> &[ClassSet] {
        &self.steps
    }

    /// `C^t`, including the background when present.
    pub fn step_classes(&self, step: usize) -> Result<&ClassSet> {
        self.steps.get(step).ok_or(Error::StepOutOfRange {
            step,
            steps: self.steps.len(),
        })
    }

    /// `Y^t = C^0 ∪ ... ∪ C^t`.
    pub fn cumulative_labels(&self, step: usize) -> Result<ClassSet> {
        self.step_classes(step)?;
        Ok(self.steps[..=step]
            .iter()
            .fold(ClassSet::empty(), |acc, s| acc.union(s)))
    }

    /// Every class of the schedule.
    pub fn universe(&self) -> ClassSet {
        self.cumulative_labels(self.steps.len() - 1)
            .expect("schedule is non-empty")
    }

    /// The step that introduces `class`; `None` for the background or an
    /// unknown class.
    pub fn step_of(&self, class: ClassId) -> Option<usize> {
        if class.is_background() && self.background_present {
            return None;
        }
        self.steps.iter().position(|s| s.contains(class))
    }

    pub fn notation(&self) -> String {
        let sizes: Vec<String> = self
            .steps
            .iter()
            .map(|s| format!("{}", s.without_background().len()))
            .collect();
        sizes.join("-")
    }
}

/// Per-pixel labels with the unlabeled marker. `I_S` is the set of labeled
/// pixels and `I_u` its complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl Annotation {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {}x{} annotation",
                labels.len(),
                height,
                width
            )));
        }
        if let Some(bad) = labels.iter().flatten().find(|c| c.0 == UNLABELED_CODE) {
            return Err(Error::UnknownClass(*bad));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// A dense annotation from a full class mask.
    pub fn dense(height: usize, width: usize, classes: &[ClassId]) -> Result<Self> {
        Self::new(height, width, classes.iter().map(|&c| Some(c)).collect())
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: alloc::vec![None; height * width],
        }
    }

    /// Decodes a raster where [`UNLABELED_CODE`] marks unlabeled pixels.
    pub fn from_codes(height: usize, width: usize, codes: &[u8]) -> Result<Self> {
        let labels = codes
            .iter()
            .map(|&c| (c != UNLABELED_CODE).then_some(ClassId(c)))
            .collect();
        Self::new(height, width, labels)
    }

    pub fn to_codes(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| l.map_or(UNLABELED_CODE, |c| c.0))
            .collect()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, pixel: usize) -> Label {
        self.labels[pixel]
    }

    pub fn set(&mut self, pixel: usize, label: Label) {
        self.labels[pixel] = label;
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_none()).collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn is_dense(&self) -> bool {
        self.labels.iter().all(|l| l.is_some())
    }

    /// Distinct labels present, without the background insertion rule of
    /// [`present_classes`].
    pub fn label_set(&self) -> ClassSet {
        let mut seen = [false; 256];
        for c in self.labels.iter().flatten() {
            seen[c.index()] = true;
        }
        ClassSet((0..=254u8).filter(|&i| seen[i as usize]).map(ClassId).collect())
    }
}

/// `U_x`: the classes appearing in an annotation. In object mode the
/// background is always included, since every image contains some.
pub fn present_classes(annotation: &Annotation, mode: Mode) -> Result<ClassSet> {
    if annotation.num_labeled() == 0 {
        return Err(Error::Empty("annotation has no labeled pixel"));
    }
    let mut set = annotation.label_set();
    if mode == Mode::Object {
        set.insert(ClassId::BACKGROUND);
    }
    Ok(set)
}
