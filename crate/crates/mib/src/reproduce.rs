//! Seeded desk-scale reproductions and the directional checks they must
//! pass.
//!
//! The incremental scenarios share one 600-scene object pool. The first
//! step does not depend on the method, so each scenario trains it once and
//! every method resumes from a copy of that checkpoint.
//!
//! The settings below are a calibrated small configuration (two 8-feature
//! conv layers, 10 epochs per step) that finishes each suite in a few
//! minutes on one core. The margins are fixed in advance and never tuned
//! per run.

use std::fmt::Write as _;
use std::time::Instant;

use mib_core::checkpoint::Checkpoint;
use mib_core::model::Architecture;
use mib_core::training::{
    run_incremental, run_incremental_from, CheckpointStore, Executor, IncrementalConfig, IncrementalMethod,
    MemoryStore, TrainParams,
};
use mib_core::{Mode, StepSchedule};
use serde::Serialize;

use crate::config::{DataConfig, ExperimentConfig, Method, Paths, Protocol, RunConfig, ScheduleSpec, SCHEMA_VERSION};
use crate::error::Result;
use crate::pipeline::{self, Generated};
use crate::records::{MetricsRecord, Scores};

/// Required all-class mIoU gain of MiB over fine-tuning after "4-2".
pub const ALL_CLASS_MARGIN: f64 = 0.05;
/// Required old-class mIoU gain of MiB over fine-tuning after "4-1-1".
pub const MULTI_STEP_MARGIN: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Incremental,
    Weak,
    All,
}

fn small_trunk() -> Architecture {
    Architecture {
        input_channels: 3,
        conv_channels: vec![8, 8],
    }
}

fn paths() -> Paths {
    Paths {
        dataset: "reproduce/data".into(),
        output: "reproduce/out".into(),
    }
}

fn data(mode: Mode, seed: u64, test_seed: u64, annotation_seed: Option<u64>, train_scenes: usize) -> DataConfig {
    let mut d: DataConfig = serde_json::from_value(serde_json::json!({
        "seed": seed,
        "train_scenes": train_scenes,
        "test_scenes": 150,
    }))
    .expect("defaults fill every other field");
    d.mode = mode;
    d.test_seed = Some(test_seed);
    d.annotation_seed = annotation_seed;
    d
}

/// Config of one incremental benchmark run.
pub fn incremental_config(protocol: Protocol, schedule: &str, method: Method) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        data: data(Mode::Object, 1, 2, None, 600),
        run: RunConfig {
            protocol,
            method,
            schedule: Some(ScheduleSpec::Notation(schedule.into())),
        },
        train: TrainParams {
            arch: small_trunk(),
            epochs: 10,
            lr_first: 0.1,
            lr_later: 0.01,
            seed: 7,
            ..TrainParams::default()
        },
        paths: paths(),
    }
}

/// Config of one weak-supervision benchmark run.
pub fn weak_config(protocol: Protocol, mode: Mode, method: Method) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        data: data(mode, 11, 12, Some(13), 300),
        run: RunConfig {
            protocol,
            method,
            schedule: None,
        },
        train: TrainParams {
            arch: small_trunk(),
            epochs: 10,
            lr_first: 0.03,
            seed: 5,
            ..TrainParams::default()
        },
        paths: paths(),
    }
}

/// Which checks a scenario feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// Old classes MiB > LwF > FT, and MiB beats FT on all classes by
    /// [`ALL_CLASS_MARGIN`].
    Forgetting,
    /// MiB beats FT on old classes by [`MULTI_STEP_MARGIN`].
    MultiStep,
    /// UNL beats PCE.
    Unlabeled,
    /// Every run finishes and reports a finite mIoU.
    Completes,
    /// Reported only.
    None,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    /// Config of the first method; the others differ only in `run.method`.
    pub base: ExperimentConfig,
    pub methods: Vec<Method>,
    pub check: Check,
}

impl Scenario {
    fn incremental(protocol: Protocol, schedule: &str, check: Check) -> Self {
        Self {
            name: format!("{schedule} {}", protocol.name()),
            base: incremental_config(protocol, schedule, Method::Ft),
            methods: vec![Method::Ft, Method::Lwf, Method::Mib],
            check,
        }
    }

    fn weak(name: &str, protocol: Protocol, mode: Mode, check: Check) -> Self {
        let methods = match mode {
            Mode::Object => vec![Method::Pce, Method::Unl, Method::PceBkg],
            Mode::Scene => vec![Method::Pce, Method::Unl],
        };
        Self {
            name: name.into(),
            base: weak_config(protocol, mode, Method::Pce),
            methods,
            check,
        }
    }

    pub fn config(&self, method: Method) -> ExperimentConfig {
        let mut cfg = self.base.clone();
        cfg.run.method = method;
        cfg
    }
}

/// "4-2" in both settings, then the three-step "4-1-1" stress run.
pub fn forgetting_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::incremental(Protocol::Disjoint, "4-2", Check::Forgetting),
        Scenario::incremental(Protocol::Overlapped, "4-2", Check::Forgetting),
    ]
}

pub fn multi_step_scenario() -> Scenario {
    Scenario::incremental(Protocol::Disjoint, "4-1-1", Check::MultiStep)
}

/// A single added class, reported without a check.
pub fn single_class_scenario() -> Scenario {
    Scenario::incremental(Protocol::Disjoint, "5-1", Check::None)
}

pub fn weak_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::weak("points", Protocol::Points, Mode::Object, Check::Unlabeled),
        Scenario::weak("scribbles", Protocol::Scribbles, Mode::Object, Check::Unlabeled),
        Scenario::weak("scene points", Protocol::Points, Mode::Scene, Check::Completes),
    ]
}

pub fn scenarios(suite: Suite) -> Vec<Scenario> {
    let incremental = || {
        let mut v = forgetting_scenarios();
        v.push(multi_step_scenario());
        v.push(single_class_scenario());
        v
    };
    match suite {
        Suite::Incremental => incremental(),
        Suite::Weak => weak_scenarios(),
        Suite::All => incremental().into_iter().chain(weak_scenarios()).collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub records: Vec<MetricsRecord>,
}

impl MethodOutcome {
    /// Test scores after the last step.
    pub fn final_scores(&self) -> &Scores {
        &self.records.last().expect("every run has a step").test
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutcome {
    pub name: String,
    pub check: Check,
    pub config_digests: Vec<String>,
    pub outcomes: Vec<MethodOutcome>,
    pub seconds: f64,
}

impl ScenarioOutcome {
    pub fn scores(&self, method: Method) -> Option<&Scores> {
        self.outcomes.iter().find(|o| o.method == method).map(|o| o.final_scores())
    }
}

/// Trains the first step once, then every method from it.
fn run_incremental_methods<E: Executor>(scenario: &Scenario, data: &Generated, exec: &E) -> Result<Vec<MethodOutcome>> {
    let base = scenario.base.incremental_config()?;
    let steps = &data.dataset.steps;
    let test = &data.dataset.test;
    let first = IncrementalConfig {
        schedule: StepSchedule::new(vec![base.schedule.steps()[0].clone()], true)?,
        method: IncrementalMethod::Ft,
        ..base.clone()
    };
    let mut shared = MemoryStore::new();
    let first_report = run_incremental(&first, &steps[..1], test, &mut shared, exec)?.reports.remove(0);
    let first_ckpt = shared.load(0)?;
    scenario
        .methods
        .iter()
        .map(|&method| {
            let cfg = scenario.config(method);
            let icfg = cfg.incremental_config()?;
            let mut store = MemoryStore::new();
            store.save(
                0,
                &Checkpoint {
                    config_digest: icfg.digest,
                    ..first_ckpt.clone()
                },
            )?;
            let out = run_incremental_from(&icfg, steps, test, 1, &mut store, exec)?;
            let records = std::iter::once(&first_report)
                .chain(&out.reports)
                .map(|r| MetricsRecord::new(&cfg, r))
                .collect();
            Ok(MethodOutcome { method, records })
        })
        .collect()
}

pub fn run_scenario<E: Executor>(scenario: &Scenario, exec: &E) -> Result<ScenarioOutcome> {
    let start = Instant::now();
    let data = pipeline::generate(&scenario.base)?;
    let outcomes = if scenario.base.run.protocol.is_incremental() {
        run_incremental_methods(scenario, &data, exec)?
    } else {
        scenario
            .methods
            .iter()
            .map(|&method| {
                let cfg = scenario.config(method);
                let (records, _) = pipeline::train(&cfg, &data.dataset, &mut MemoryStore::new(), exec)?;
                Ok(MethodOutcome { method, records })
            })
            .collect::<Result<_>>()?
    };
    Ok(ScenarioOutcome {
        name: scenario.name.clone(),
        check: scenario.check,
        config_digests: scenario
            .methods
            .iter()
            .map(|&m| mib_core::checkpoint::hex(&scenario.config(m).digest()))
            .collect(),
        outcomes,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Claim {
    pub scenario: String,
    pub statement: String,
    pub passed: bool,
}

fn metric(o: &ScenarioOutcome, method: Method, pick: fn(&Scores) -> Option<f64>) -> Option<f64> {
    o.scores(method).and_then(pick)
}

fn old(s: &Scores) -> Option<f64> {
    s.miou_old
}

fn all(s: &Scores) -> Option<f64> {
    s.miou_all
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

fn greater(o: &ScenarioOutcome, what: &str, pick: fn(&Scores) -> Option<f64>, a: Method, b: Method, margin: f64) -> Claim {
    let (va, vb) = (metric(o, a, pick), metric(o, b, pick));
    let passed = matches!((va, vb), (Some(x), Some(y)) if x - y >= margin && x > y);
    let rel = if margin > 0.0 {
        format!(">= {} + {margin:.2}", b.name())
    } else {
        format!("> {}", b.name())
    };
    Claim {
        scenario: o.name.clone(),
        statement: format!("{what} {} {rel} ({} vs {})", a.name(), fmt(va), fmt(vb)),
        passed,
    }
}

/// The directional statements a scenario outcome must satisfy.
pub fn claims(o: &ScenarioOutcome) -> Vec<Claim> {
    match o.check {
        Check::Forgetting => vec![
            greater(o, "old-class mIoU", old, Method::Mib, Method::Lwf, 0.0),
            greater(o, "old-class mIoU", old, Method::Lwf, Method::Ft, 0.0),
            greater(o, "all-class mIoU", all, Method::Mib, Method::Ft, ALL_CLASS_MARGIN),
        ],
        Check::MultiStep => vec![greater(o, "old-class mIoU", old, Method::Mib, Method::Ft, MULTI_STEP_MARGIN)],
        Check::Unlabeled => vec![greater(o, "mIoU", all, Method::Unl, Method::Pce, 0.0)],
        Check::Completes => o
            .outcomes
            .iter()
            .map(|m| {
                let v = m.final_scores().miou_all;
                Claim {
                    scenario: o.name.clone(),
                    statement: format!("{} finishes with a finite mIoU ({})", m.method.name(), fmt(v)),
                    passed: v.is_some_and(f64::is_finite),
                }
            })
            .collect(),
        Check::None => Vec::new(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub suite: Suite,
    pub scenarios: Vec<ScenarioOutcome>,
    pub claims: Vec<Claim>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.claims.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.claims
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.scenario, c.statement))
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.scenarios {
            let _ = writeln!(out, "== {} ({:.1}s)", s.name, s.seconds);
            let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>7} {:>7}", "method", "old", "new", "all", "P-Acc");
            for m in &s.outcomes {
                let sc = m.final_scores();
                let pct = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v));
                let _ = writeln!(
                    out,
                    "{:<8} {:>7} {:>7} {:>7} {:>7.1}",
                    m.method.name(),
                    pct(sc.miou_old),
                    pct(sc.miou_new),
                    pct(sc.miou_all),
                    100.0 * sc.pixel_accuracy
                );
            }
        }
        for c in &self.claims {
            let _ = writeln!(out, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.scenario, c.statement);
        }
        out
    }
}

pub fn run_suite<E: Executor>(suite: Suite, exec: &E, mut progress: impl FnMut(&ScenarioOutcome)) -> Result<SuiteReport> {
    let mut outcomes = Vec::new();
    let mut all_claims = Vec::new();
    for scenario in scenarios(suite) {
        let o = run_scenario(&scenario, exec)?;
        progress(&o);
        all_claims.extend(claims(&o));
        outcomes.push(o);
    }
    Ok(SuiteReport {
        schema_version: SCHEMA_VERSION,
        suite,
        scenarios: outcomes,
        claims: all_claims,
    })
}
