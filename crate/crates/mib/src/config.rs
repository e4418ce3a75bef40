//! Experiment configuration.
//!
//! A config is one JSON document with four sections: `data` (scene
//! generation), `run` (protocol, method, schedule), `train` (optimization,
//! every key optional) and `paths`. Unknown keys are rejected everywhere.
//! The config digest is the SHA-256 of the canonical JSON of everything but
//! `paths`, so moving a run does not change its identity.

use std::path::{Path, PathBuf};

use mib_core::checkpoint::ConfigDigest;
use mib_core::synthdata::{derive_seed, SceneParams, WeakKind};
use mib_core::training::{IncrementalConfig, IncrementalMethod, TrainParams, WeakConfig, WeakMethod};
use mib_core::{ClassId, ClassSet, Mode, StepSchedule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Incremental; every scene is used by one step only.
    Disjoint,
    /// Incremental; a scene is used by every step whose classes it shows.
    Overlapped,
    /// Weak; one labeled pixel per instance.
    Points,
    /// Weak; short scribbles inside each instance and the background.
    Scribbles,
    /// Weak protocol with full masks, as an upper bound.
    Dense,
}

impl Protocol {
    pub fn is_incremental(self) -> bool {
        matches!(self, Self::Disjoint | Self::Overlapped)
    }

    pub fn weak_kind(self) -> Option<WeakKind> {
        match self {
            Self::Points => Some(WeakKind::Points),
            Self::Scribbles => Some(WeakKind::Scribbles),
            Self::Dense => Some(WeakKind::Dense),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Disjoint => "disjoint",
            Self::Overlapped => "overlapped",
            Self::Points => "points",
            Self::Scribbles => "scribbles",
            Self::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ft,
    Lwf,
    Mib,
    Pce,
    Unl,
    PceBkg,
}

impl Method {
    pub fn incremental(self) -> Option<IncrementalMethod> {
        match self {
            Self::Ft => Some(IncrementalMethod::Ft),
            Self::Lwf => Some(IncrementalMethod::Lwf),
            Self::Mib => Some(IncrementalMethod::Mib),
            _ => None,
        }
    }

    pub fn weak(self) -> Option<WeakMethod> {
        match self {
            Self::Pce => Some(WeakMethod::Pce),
            Self::Unl => Some(WeakMethod::Unl),
            Self::PceBkg => Some(WeakMethod::PceBkg),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match (self.incremental(), self.weak()) {
            (Some(m), _) => m.name(),
            (_, Some(m)) => m.name(),
            _ => unreachable!("every method is incremental or weak"),
        }
    }

    fn key(self) -> &'static str {
        match self {
            Self::Ft => "ft",
            Self::Lwf => "lwf",
            Self::Mib => "mib",
            Self::Pce => "pce",
            Self::Unl => "unl",
            Self::PceBkg => "pce_bkg",
        }
    }
}

/// Either `"4-2"` notation or explicit lists of the classes each step adds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Notation(String),
    Steps(Vec<Vec<u8>>),
}

impl ScheduleSpec {
    pub fn resolve(&self) -> mib_core::Result<StepSchedule> {
        match self {
            Self::Notation(s) => StepSchedule::parse(s, true),
            Self::Steps(steps) => {
                let sets = steps
                    .iter()
                    .map(|ids| ClassSet::new(ids.iter().map(|&i| ClassId(i)).chain([ClassId::BACKGROUND])))
                    .collect::<mib_core::Result<Vec<_>>>()?;
                StepSchedule::new(sets, true)
            }
        }
    }
}

fn default_mode() -> Mode {
    Mode::Object
}
fn default_side() -> usize {
    64
}
fn default_max_objects() -> usize {
    4
}
fn default_min_regions() -> usize {
    3
}
fn default_max_regions() -> usize {
    6
}
fn default_noise() -> f64 {
    0.05
}
fn default_min_per_step() -> usize {
    50
}
fn default_scribble_length() -> usize {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Seed of the training pool.
    pub seed: u64,
    /// Seed of the test scenes; derived from `seed` when absent.
    #[serde(default)]
    pub test_seed: Option<u64>,
    /// Seed of the weak annotators; derived from `seed` when absent.
    #[serde(default)]
    pub annotation_seed: Option<u64>,
    pub train_scenes: usize,
    pub test_scenes: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    /// Renderable classes; 1..=6 in object mode and 1..=8 in scene mode
    /// when absent.
    #[serde(default)]
    pub classes: Option<ClassSet>,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_min_regions")]
    pub min_regions: usize,
    #[serde(default = "default_max_regions")]
    pub max_regions: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Smallest acceptable number of scenes in any incremental step.
    #[serde(default = "default_min_per_step")]
    pub min_per_step: usize,
    #[serde(default = "default_scribble_length")]
    pub scribble_length: usize,
}

impl DataConfig {
    pub fn scene_params(&self) -> SceneParams {
        let base = match self.mode {
            Mode::Object => SceneParams::object_default(),
            Mode::Scene => SceneParams::scene_default(),
        };
        SceneParams {
            height: self.height,
            width: self.width,
            mode: self.mode,
            classes: self.classes.clone().unwrap_or(base.classes),
            max_objects: self.max_objects,
            min_regions: self.min_regions,
            max_regions: self.max_regions,
            noise_std: self.noise_std,
        }
    }

    pub fn test_seed(&self) -> u64 {
        self.test_seed.unwrap_or_else(|| derive_seed(self.seed, 1))
    }

    pub fn annotation_seed(&self) -> u64 {
        self.annotation_seed.unwrap_or_else(|| derive_seed(self.seed, 2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: Protocol,
    pub method: Method,
    /// Required by the incremental protocols, rejected by the weak ones.
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
}

/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub train: TrainParams,
    pub paths: Paths,
}

#[derive(Serialize)]
struct DigestView<'a> {
    schema_version: u32,
    data: &'a DataConfig,
    run: &'a RunConfig,
    train: &'a TrainParams,
}

#[derive(Serialize)]
struct DataDigestView<'a> {
    schema_version: u32,
    data: &'a DataConfig,
    protocol: Protocol,
    schedule: &'a Option<ScheduleSpec>,
}

fn sha256_json<T: Serialize>(value: &T) -> ConfigDigest {
    let bytes = serde_json::to_vec(value).expect("config views always serialize");
    Sha256::digest(&bytes).into()
}

fn invalid(field: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {message}"))
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("{} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let d = &self.data;
        if d.train_scenes == 0 {
            return Err(invalid("data.train_scenes", "must be positive"));
        }
        if d.test_scenes == 0 {
            return Err(invalid("data.test_scenes", "must be positive"));
        }
        if d.scribble_length == 0 {
            return Err(invalid("data.scribble_length", "must be positive"));
        }
        if let Some(c) = &d.classes {
            if c.contains(ClassId::BACKGROUND) {
                return Err(invalid("data.classes", "must not contain the background id 0"));
            }
        }
        d.scene_params().validate().map_err(|e| invalid("data", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        if self.train.arch.input_channels != 3 {
            return Err(invalid("train.arch.input_channels", "synthetic scenes have 3 channels"));
        }

        let run = &self.run;
        let protocol = run.protocol.name();
        if run.protocol.is_incremental() {
            if run.method.incremental().is_none() {
                return Err(invalid(
                    "run.method",
                    format!("{} is not an incremental method (use ft, lwf or mib)", run.method.key()),
                ));
            }
            if d.mode != Mode::Object {
                return Err(invalid("data.mode", format!("protocol {protocol} needs object scenes")));
            }
            let schedule = self.schedule()?.ok_or_else(|| {
                invalid("run.schedule", format!("required for protocol {protocol}"))
            })?;
            let drawable = d.scene_params().classes;
            let missing = schedule.universe().without_background().difference(&drawable);
            if !missing.is_empty() {
                return Err(invalid("run.schedule", format!("classes {missing} are never rendered")));
            }
        } else {
            if run.method.weak().is_none() {
                return Err(invalid(
                    "run.method",
                    format!("{} is not a weak-supervision method (use pce, unl or pce_bkg)", run.method.key()),
                ));
            }
            if run.schedule.is_some() {
                return Err(invalid("run.schedule", format!("not used by protocol {protocol}")));
            }
            if run.method == Method::PceBkg && d.mode == Mode::Scene {
                return Err(invalid("run.method", "pce_bkg needs a background class"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Option<StepSchedule>> {
        self.run
            .schedule
            .as_ref()
            .map(|s| s.resolve().map_err(|e| invalid("run.schedule", e)))
            .transpose()
    }

    /// Identity of a run: every section except `paths`.
    pub fn digest(&self) -> ConfigDigest {
        sha256_json(&DigestView {
            schema_version: self.schema_version,
            data: &self.data,
            run: &self.run,
            train: &self.train,
        })
    }

    /// Identity of the dataset a run trains on: everything that shapes the
    /// generated files.
    pub fn data_digest(&self) -> ConfigDigest {
        sha256_json(&DataDigestView {
            schema_version: self.schema_version,
            data: &self.data,
            protocol: self.run.protocol,
            schedule: &self.run.schedule,
        })
    }

    /// Model classes of a weak run.
    pub fn weak_classes(&self) -> ClassSet {
        let drawn = self.data.scene_params().classes;
        match self.data.mode {
            Mode::Object => drawn.union(&ClassSet::new([ClassId::BACKGROUND]).expect("valid id")),
            Mode::Scene => drawn,
        }
    }

    pub fn incremental_config(&self) -> Result<IncrementalConfig> {
        let method = self
            .run
            .method
            .incremental()
            .ok_or_else(|| invalid("run.method", "not an incremental method"))?;
        let schedule = self.schedule()?.ok_or_else(|| invalid("run.schedule", "missing"))?;
        Ok(IncrementalConfig {
            schedule,
            method,
            train: self.train.clone(),
            digest: self.digest(),
        })
    }

    pub fn weak_config(&self) -> Result<WeakConfig> {
        let method = self
            .run
            .method
            .weak()
            .ok_or_else(|| invalid("run.method", "not a weak-supervision method"))?;
        Ok(WeakConfig {
            method,
            mode: self.data.mode,
            classes: self.weak_classes(),
            train: self.train.clone(),
            digest: self.digest(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "data": {"seed": 3, "train_scenes": 40, "test_scenes": 8},
        "run": {"protocol": "disjoint", "method": "mib", "schedule": "4-2"},
        "paths": {"dataset": "data", "output": "out"}
    }"#;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig::from_json(MINIMAL).unwrap()
    }

    fn with(edit: impl FnOnce(&mut serde_json::Value)) -> Result<ExperimentConfig> {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        edit(&mut v);
        ExperimentConfig::from_json(&v.to_string())
    }

    fn config_error(r: Result<ExperimentConfig>) -> String {
        match r {
            Err(CliError::Config(m)) => m,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = minimal();
        assert_eq!(cfg.train, TrainParams::default());
        assert_eq!(cfg.data.height, 64);
        assert_eq!(cfg.data.min_per_step, 50);
        assert_eq!(cfg.schedule().unwrap().unwrap(), StepSchedule::parse("4-2", true).unwrap());
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let m = config_error(with(|v| {
            v["data"].as_object_mut().unwrap().remove("train_scenes");
        }));
        assert!(m.contains("train_scenes"), "{m}");
        let m = config_error(with(|v| v["train"] = serde_json::json!({"epoch": 3})));
        assert!(m.contains("epoch"), "{m}");
        let m = config_error(with(|v| v["extra"] = serde_json::json!(1)));
        assert!(m.contains("extra"), "{m}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let cases: [(&str, Box<dyn FnOnce(&mut serde_json::Value)>); 6] = [
            ("schema_version", Box::new(|v| v["schema_version"] = 2.into())),
            ("run.method", Box::new(|v| v["run"]["method"] = "unl".into())),
            ("run.schedule", Box::new(|v| {
                v["run"].as_object_mut().unwrap().remove("schedule");
            })),
            ("run.schedule", Box::new(|v| v["run"]["schedule"] = "4-4".into())),
            ("data.mode", Box::new(|v| v["data"]["mode"] = "scene".into())),
            ("train", Box::new(|v| v["train"] = serde_json::json!({"momentum": 1.5}))),
        ];
        for (field, edit) in cases {
            let m = config_error(with(edit));
            assert!(m.starts_with(field), "{field}: {m}");
        }
    }

    #[test]
    fn explicit_schedule_lists() {
        let cfg = with(|v| v["run"]["schedule"] = serde_json::json!([[1, 2, 3, 4], [5], [6]])).unwrap();
        assert_eq!(cfg.schedule().unwrap().unwrap(), StepSchedule::parse("4-1-1", true).unwrap());
    }

    #[test]
    fn digest_ignores_paths_but_not_method() {
        let a = minimal();
        let mut b = a.clone();
        b.paths.output = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.run.method = Method::Ft;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.data_digest(), b.data_digest());
        b.train.seed = 9;
        assert_eq!(a.data_digest(), b.data_digest());
        b.data.seed = 9;
        assert_ne!(a.data_digest(), b.data_digest());
    }

    #[test]
    fn weak_protocols() {
        let cfg = with(|v| {
            v["run"] = serde_json::json!({"protocol": "points", "method": "unl"});
        })
        .unwrap();
        assert_eq!(cfg.weak_classes(), ClassSet::from_ids(&[0, 1, 2, 3, 4, 5, 6]).unwrap());
        let scene = with(|v| {
            v["run"] = serde_json::json!({"protocol": "points", "method": "unl"});
            v["data"]["mode"] = "scene".into();
        })
        .unwrap();
        assert_eq!(scene.weak_classes(), ClassSet::from_ids(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap());
        let m = config_error(with(|v| {
            v["run"] = serde_json::json!({"protocol": "points", "method": "pce_bkg"});
            v["data"]["mode"] = "scene".into();
        }));
        assert!(m.starts_with("run.method"), "{m}");
        let m = config_error(with(|v| {
            v["run"] = serde_json::json!({"protocol": "points", "method": "pce", "schedule": "4-2"});
        }));
        assert!(m.starts_with("run.schedule"), "{m}");
    }
}
