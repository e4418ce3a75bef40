//! Confusion matrices and the scores derived from them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::labelspace::{ClassId, ClassSet, Label};

/// `K x K` counts over an evaluation label set; rows are truth, columns
/// are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: ClassSet,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: ClassSet) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Empty("evaluation label set"));
        }
        let k = classes.len();
        Ok(Self {
            classes,
            counts: vec![0; k * k],
        })
    }

    pub fn classes(&self) -> &ClassSet {
        &self.classes
    }

    pub fn count(&self, truth: ClassId, pred: ClassId) -> u64 {
        match (self.classes.position(truth), self.classes.position(pred)) {
            (Some(t), Some(p)) => self.counts[t * self.classes.len() + p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per position; unlabeled truth pixels are skipped.
    pub fn accumulate(&mut self, truth: &[Label], pred: &[ClassId]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "truth has {} pixels, prediction {}",
                truth.len(),
                pred.len()
            )));
        }
        let k = self.classes.len();
        let mut delta = vec![0u64; k * k];
        for (t, &p) in truth.iter().zip(pred) {
            let Some(t) = *t else { continue };
            let ti = self.classes.position(t).ok_or(Error::UnknownClass(t))?;
            let pi = self.classes.position(p).ok_or(Error::UnknownClass(p))?;
            delta[ti * k + pi] += 1;
        }
        for (c, d) in self.counts.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::InvalidArgument(format!(
                "cannot merge matrices over {} and {}",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class in layout order; `None` when the
    /// class is absent from both truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.classes.len();
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let row: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let col: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean of the defined per-class IoUs, `None` if none is defined.
    pub fn mean_iou(&self) -> Option<f64> {
        mean_defined(self.iou_per_class().into_iter())
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("confusion matrix with no pixels"));
        }
        let k = self.classes.len();
        let trace: u64 = (0..k).map(|c| self.counts[c * k + c]).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Mean IoU within each group. Groups must be disjoint subsets of the
    /// evaluation set; classes outside every group are ignored.
    pub fn grouped_miou(&self, groups: &[ClassSet]) -> Result<Vec<Option<f64>>> {
        for (i, g) in groups.iter().enumerate() {
            if !g.is_subset(&self.classes) {
                return Err(Error::InvalidArgument(format!(
                    "group {g} is not within {}",
                    self.classes
                )));
            }
            for h in &groups[i + 1..] {
                if !g.intersection(h).is_empty() {
                    return Err(Error::InvalidArgument(format!("groups {g} and {h} overlap")));
                }
            }
        }
        let ious = self.iou_per_class();
        Ok(groups
            .iter()
            .map(|g| mean_defined(g.iter().map(|c| ious[self.classes.position(c).expect("subset")])))
            .collect())
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[u8]) -> ClassSet {
        ClassSet::from_ids(ids).unwrap()
    }

    fn ids(v: &[u8]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    fn labels(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&c| Some(ClassId(c))).collect()
    }

    fn cm_from(rows: &[[u64; 2]]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(set(&[0, 1])).unwrap();
        for (t, row) in rows.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    cm.accumulate(&labels(&[t as u8]), &ids(&[p as u8])).unwrap();
                }
            }
        }
        cm
    }

    #[test]
    fn accumulate_definition() {
        let mut cm = ConfusionMatrix::new(set(&[0, 1, 2])).unwrap();
        cm.accumulate(&labels(&[1, 2]), &ids(&[1, 1])).unwrap();
        assert_eq!(cm.count(ClassId(1), ClassId(1)), 1);
        assert_eq!(cm.count(ClassId(2), ClassId(1)), 1);
        assert_eq!(cm.total(), 2);

        let before = cm.clone();
        cm.accumulate(&[None, None], &ids(&[0, 2])).unwrap();
        assert_eq!(cm, before);

        assert!(cm.accumulate(&labels(&[1]), &ids(&[1, 2])).is_err());
        assert_eq!(cm.accumulate(&labels(&[5]), &ids(&[1])), Err(Error::UnknownClass(ClassId(5))));
        assert_eq!(cm, before);
    }

    #[test]
    fn identical_masks_fill_the_diagonal() {
        let mut cm = ConfusionMatrix::new(set(&[0, 1, 2])).unwrap();
        let t = [0, 1, 2, 2, 1, 0, 0];
        cm.accumulate(&labels(&t), &ids(&t)).unwrap();
        assert_eq!(cm.iou_per_class(), vec![Some(1.0); 3]);
        assert_eq!(cm.mean_iou(), Some(1.0));
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_two_class_matrix() {
        let cm = cm_from(&[[3, 1], [1, 3]]);
        assert_eq!(cm.iou_per_class(), vec![Some(0.6), Some(0.6)]);
        assert_eq!(cm.mean_iou(), Some(0.6));
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.75);
        assert_eq!(cm.grouped_miou(&[set(&[0, 1])]).unwrap(), vec![Some(0.6)]);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(set(&[0, 1, 2])).unwrap();
        cm.accumulate(&labels(&[0, 1, 1]), &ids(&[0, 1, 0])).unwrap();
        let iou = cm.iou_per_class();
        assert_eq!(iou[2], None);
        assert_eq!(cm.mean_iou(), Some((0.5 + 0.5) / 2.0));
        assert_eq!(cm.grouped_miou(&[set(&[2])]).unwrap(), vec![None]);
        assert!(ConfusionMatrix::new(set(&[0])).unwrap().pixel_accuracy().is_err());
    }

    #[test]
    fn grouped_recombination() {
        let mut cm = ConfusionMatrix::new(set(&[0, 1, 2, 3])).unwrap();
        cm.accumulate(&labels(&[0, 0, 1, 1, 2, 3, 3, 0, 2]), &ids(&[0, 1, 1, 2, 2, 3, 0, 0, 3]))
            .unwrap();
        let old = set(&[0, 1]);
        let new = set(&[2, 3]);
        let g = cm.grouped_miou(&[old.clone(), new.clone()]).unwrap();
        let all = cm.mean_iou().unwrap();
        let recombined = (g[0].unwrap() * old.len() as f64 + g[1].unwrap() * new.len() as f64) / 4.0;
        assert!((recombined - all).abs() < 1e-15);
        let iou = cm.iou_per_class();
        assert_eq!(cm.grouped_miou(&[set(&[3])]).unwrap(), vec![iou[3]]);
        assert!(cm.grouped_miou(&[old.clone(), set(&[1, 2])]).is_err());
        assert!(cm.grouped_miou(&[set(&[4])]).is_err());
    }

    proptest! {
        #[test]
        fn invariants(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200), split in 0usize..200) {
            let truth: Vec<Label> = pairs.iter().map(|p| Some(ClassId(p.0))).collect();
            let pred: Vec<ClassId> = pairs.iter().map(|p| ClassId(p.1)).collect();
            let mut whole = ConfusionMatrix::new(set(&[0, 1, 2, 3])).unwrap();
            whole.accumulate(&truth, &pred).unwrap();

            let mut rev = ConfusionMatrix::new(set(&[0, 1, 2, 3])).unwrap();
            let rt: Vec<Label> = truth.iter().rev().cloned().collect();
            let rp: Vec<ClassId> = pred.iter().rev().cloned().collect();
            rev.accumulate(&rt, &rp).unwrap();
            prop_assert_eq!(&rev, &whole);

            let s = split.min(pairs.len());
            let mut a = ConfusionMatrix::new(set(&[0, 1, 2, 3])).unwrap();
            let mut b = a.clone();
            a.accumulate(&truth[..s], &pred[..s]).unwrap();
            b.accumulate(&truth[s..], &pred[s..]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(&a, &whole);

            let defined: Vec<f64> = whole.iou_per_class().into_iter().flatten().collect();
            prop_assert!(defined.iter().all(|v| (0.0..=1.0).contains(v)));
            let m = whole.mean_iou().unwrap();
            let lo = defined.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = defined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo - 1e-15 <= m && m <= hi + 1e-15);
            let acc = whole.pixel_accuracy().unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
        }
    }
}
