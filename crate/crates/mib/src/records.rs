//! Per-step metric records and the human summary table.
//!
//! Records hold only deterministic quantities, so two runs of one config
//! produce byte-identical files; wall-clock timings go to a separate
//! `timing.json`.

use std::fmt::Write as _;
use std::path::Path;

use mib_core::checkpoint::hex;
use mib_core::training::{EvalSummary, StepReport};
use mib_core::{ClassId, ClassSet};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, Protocol, SCHEMA_VERSION};
use crate::error::Result;
use crate::formats::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassIou {
    pub class: ClassId,
    /// `null` when the class appears in neither truth nor prediction.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scores {
    pub per_class_iou: Vec<ClassIou>,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
    pub pixel_accuracy: f64,
    pub pixels: u64,
}

impl From<&EvalSummary> for Scores {
    fn from(s: &EvalSummary) -> Self {
        Self {
            per_class_iou: s.per_class_iou.iter().map(|&(class, iou)| ClassIou { class, iou }).collect(),
            miou_old: s.miou_old,
            miou_new: s.miou_new,
            miou_all: s.miou_all,
            pixel_accuracy: s.pixel_accuracy,
            pixels: s.pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub config_digest: String,
    pub data_digest: String,
    pub seed: u64,
    pub protocol: Protocol,
    pub method: Method,
    /// Schedule notation, e.g. `"4-2"`, for incremental runs.
    pub schedule: Option<String>,
    pub step: usize,
    /// Classes the model predicts after this step.
    pub classes: ClassSet,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub iterations: usize,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    pub test: Scores,
    pub holdout: Option<Scores>,
}

impl MetricsRecord {
    pub fn new(cfg: &ExperimentConfig, report: &StepReport) -> Self {
        let schedule = cfg.schedule().ok().flatten().map(|s| s.notation());
        Self {
            schema_version: SCHEMA_VERSION,
            config_digest: hex(&cfg.digest()),
            data_digest: hex(&cfg.data_digest()),
            seed: cfg.train.seed,
            protocol: cfg.run.protocol,
            method: cfg.run.method,
            schedule,
            step: report.step,
            classes: report.classes.clone(),
            train_samples: report.train_samples,
            holdout_samples: report.holdout_samples,
            iterations: report.iterations,
            loss_curve: report.loss_curve.clone(),
            test: Scores::from(&report.test),
            holdout: report.holdout.as_ref().map(Scores::from),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("records always serialize");
        s.push('\n');
        s
    }

    pub fn file_name(step: usize) -> String {
        format!("step_{step:02}.json")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(Self::file_name(self.step)), self.to_json().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTiming {
    pub step: usize,
    /// Seconds from the start of the run until the step's checkpoint was
    /// written.
    pub seconds_to_checkpoint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub schema_version: u32,
    pub config_digest: String,
    pub threads: usize,
    pub steps: Vec<StepTiming>,
    pub total_seconds: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

/// One line per record: step, classes, old / new / all mIoU and pixel
/// accuracy, in percent.
pub fn summary_table(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:<5} {:<24} {:>7} {:>7} {:>7} {:>7}",
        "method", "step", "classes", "old", "new", "all", "P-Acc"
    );
    for r in records {
        let _ = writeln!(
            out,
            "{:<8} {:<5} {:<24} {:>7} {:>7} {:>7} {:>7.1}",
            r.method.name(),
            r.step,
            r.classes.to_string(),
            cell(r.test.miou_old),
            cell(r.test.miou_new),
            cell(r.test.miou_all),
            100.0 * r.test.pixel_accuracy
        );
    }
    out
}
