//! The five subcommands. Each writes its human-readable output to `out`
//! and returns what it produced, so tests can drive them directly.

use std::io::Write;
use std::path::PathBuf;

use mib_core::checkpoint::{hex, Checkpoint};
use mib_core::gradcheck::full_suite;
use mib_core::training::{evaluate, summarize};
use serde::Serialize;

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::error::{CliError, Result};
use crate::exec::Threaded;
use crate::formats::{manifest_for, read_dataset, read_file, write_atomic, write_dataset, Dataset, Manifest};
use crate::pipeline;
use crate::records::{summary_table, MetricsRecord, Scores, StepTiming, Timing};
use crate::reproduce::{run_suite, Suite, SuiteReport};
use crate::store::DirStore;

pub const DEFAULT_GRADCHECK_SEED: u64 = 2024;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`; the base seed of `gradcheck`.
    pub seed: Option<u64>,
    pub threads: usize,
    /// Overrides the dataset directory of `generate` and the output
    /// directory of `train` and `eval`; `gradcheck` and `reproduce` write
    /// a JSON report there.
    pub out: Option<PathBuf>,
}

impl Options {
    fn executor(&self) -> Threaded {
        Threaded::new(self.threads)
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(CliError::io("<stdout>".as_ref()))
}

pub fn load_config(opts: &Options) -> Result<ExperimentConfig> {
    let path = opts
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --config <file>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = opts.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn output_dir(opts: &Options, cfg: &ExperimentConfig) -> PathBuf {
    opts.out.clone().unwrap_or_else(|| cfg.paths.output.clone())
}

/// Loads the configured dataset and checks that the config produced it.
fn load_dataset(cfg: &ExperimentConfig) -> Result<(Manifest, Dataset)> {
    let (manifest, dataset) = read_dataset(&cfg.paths.dataset)?;
    let expected = hex(&cfg.data_digest());
    if manifest.data_digest != expected {
        return Err(CliError::Config(format!(
            "dataset {} was generated from different data settings (digest {}, config gives {expected}); run `mib generate`",
            cfg.paths.dataset.display(),
            manifest.data_digest
        )));
    }
    Ok((manifest, dataset))
}

pub fn generate(opts: &Options, out: &mut dyn Write) -> Result<Manifest> {
    let cfg = load_config(opts)?;
    let root = opts.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    let g = pipeline::generate(&cfg)?;
    let manifest = manifest_for(
        &g.dataset,
        &g.step_classes,
        g.pool_size,
        cfg.run.protocol,
        hex(&cfg.data_digest()),
        &g.excluded,
    )?;
    write_dataset(&root, &g.dataset, &manifest)?;
    let mut text = format!("dataset {} ({} protocol)\n", root.display(), cfg.run.protocol.name());
    for s in &manifest.steps {
        text += &format!("  step {}: {} scenes, classes {}\n", s.step, s.scenes.len(), s.classes);
    }
    text += &format!(
        "  test: {} scenes; left out: {} background-only, {} outside the schedule\n",
        manifest.test_scenes, manifest.excluded.background_only, manifest.excluded.outside_schedule
    );
    say(out, &text)?;
    Ok(manifest)
}

pub fn train(opts: &Options, out: &mut dyn Write) -> Result<Vec<MetricsRecord>> {
    let cfg = load_config(opts)?;
    let (_, dataset) = load_dataset(&cfg)?;
    let output = output_dir(opts, &cfg);
    let mut store = DirStore::new(output.join("checkpoints"));
    let (records, _) = pipeline::train(&cfg, &dataset, &mut store, &opts.executor())?;
    let metrics = output.join("metrics");
    for r in &records {
        r.write(&metrics)?;
    }
    write_atomic(&output.join("config.json"), cfg.to_json().as_bytes())?;
    let times = store.save_times();
    let timing = Timing {
        schema_version: SCHEMA_VERSION,
        config_digest: hex(&cfg.digest()),
        threads: opts.executor().threads(),
        steps: times
            .iter()
            .map(|&(step, seconds_to_checkpoint)| StepTiming {
                step,
                seconds_to_checkpoint,
            })
            .collect(),
        total_seconds: times.last().map_or(0.0, |t| t.1),
    };
    let text = serde_json::to_string_pretty(&timing).expect("timings always serialize");
    write_atomic(&output.join("timing.json"), text.as_bytes())?;
    say(
        out,
        &format!(
            "{} on {} ({}), records in {}\n{}",
            cfg.run.method.name(),
            cfg.run.protocol.name(),
            records.first().and_then(|r| r.schedule.clone()).unwrap_or_else(|| "single step".into()),
            metrics.display(),
            summary_table(&records)
        ),
    )?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub schema_version: u32,
    pub config_digest: String,
    pub step: usize,
    pub test: Scores,
}

/// Scores the checkpoint of `step` (the last one when `None`) on the test
/// scenes.
pub fn eval(opts: &Options, step: Option<usize>, out: &mut dyn Write) -> Result<EvalRecord> {
    let cfg = load_config(opts)?;
    let (_, dataset) = load_dataset(&cfg)?;
    let output = output_dir(opts, &cfg);
    let store = DirStore::new(output.join("checkpoints"));
    let step = step
        .or_else(|| store.latest())
        .ok_or_else(|| CliError::format(store.dir(), "no checkpoint found (run `mib train` first)"))?;
    let path = store.path(step);
    let ckpt = Checkpoint::decode_expecting(&read_file(&path)?, &cfg.digest())?;
    let old = match cfg.schedule()? {
        Some(s) => s.cumulative_labels(0)?,
        None => ckpt.model.label_space().clone(),
    };
    let cm = evaluate(&ckpt.model, &dataset.test, &opts.executor())?;
    let summary = summarize(&cm, &old)?;
    let record = EvalRecord {
        schema_version: SCHEMA_VERSION,
        config_digest: hex(&cfg.digest()),
        step,
        test: Scores::from(&summary),
    };
    let text = serde_json::to_string_pretty(&record).expect("records always serialize");
    write_atomic(&output.join("eval").join(format!("step_{step:02}.json")), text.as_bytes())?;
    let mut table = format!("checkpoint {}\n{:<6} {:>7}\n", path.display(), "class", "IoU");
    for c in &record.test.per_class_iou {
        let v = c.iou.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v));
        table += &format!("{:<6} {v:>7}\n", c.class.to_string());
    }
    let pct = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v));
    table += &format!(
        "old {}  new {}  all {}  P-Acc {:.1}  (old = {})\n",
        pct(record.test.miou_old),
        pct(record.test.miou_new),
        pct(record.test.miou_all),
        100.0 * record.test.pixel_accuracy,
        old
    );
    say(out, &table)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckLine {
    pub name: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub entries: usize,
    /// Entries outside the absolute floor, the only ones scored relatively.
    pub above_floor: usize,
    pub passed: bool,
}

/// Runs every loss and the micro model against finite differences.
pub fn gradcheck(opts: &Options, out: &mut dyn Write) -> Result<Vec<GradcheckLine>> {
    let seed = opts.seed.unwrap_or(DEFAULT_GRADCHECK_SEED);
    let lines: Vec<GradcheckLine> = full_suite(seed)?
        .into_iter()
        .map(|r| GradcheckLine {
            passed: r.passed(),
            name: r.name,
            instances: r.instances,
            max_relative_error: r.worst.max_relative_error,
            max_abs_error: r.worst.max_abs_error,
            tolerance: r.tolerance,
            entries: r.worst.entries,
            above_floor: r.worst.above_floor,
        })
        .collect();
    let mut text = format!(
        "{:<18} {:>9} {:>12} {:>12} {:>8} {:>15}\n",
        "check", "instances", "max rel err", "max abs err", "rel tol", "above 1e-8 abs"
    );
    for l in &lines {
        text += &format!(
            "{:<18} {:>9} {:>12.3e} {:>12.3e} {:>8.0e} {:>15}  {}\n",
            l.name,
            l.instances,
            l.max_relative_error,
            l.max_abs_error,
            l.tolerance,
            format!("{}/{}", l.above_floor, l.entries),
            if l.passed { "ok" } else { "FAIL" }
        );
    }
    say(out, &text)?;
    if let Some(dir) = &opts.out {
        let json = serde_json::to_string_pretty(&lines).expect("reports always serialize");
        write_atomic(&dir.join("gradcheck.json"), json.as_bytes())?;
    }
    let failed: Vec<String> = lines
        .iter()
        .filter(|l| !l.passed)
        .map(|l| format!("{}: relative error {:.3e} >= {:.0e}", l.name, l.max_relative_error, l.tolerance))
        .collect();
    if failed.is_empty() {
        Ok(lines)
    } else {
        Err(CliError::Failed(failed))
    }
}

pub fn reproduce(opts: &Options, suite: Suite, out: &mut dyn Write) -> Result<SuiteReport> {
    if opts.config.is_some() || opts.seed.is_some() {
        return Err(CliError::Usage("reproduce runs fixed configs and seeds; drop --config and --seed".into()));
    }
    let mut progress_error = None;
    let report = run_suite(suite, &opts.executor(), |o| {
        if let Err(e) = say(out, &format!("finished {} in {:.1}s\n", o.name, o.seconds)) {
            progress_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = progress_error {
        return Err(e);
    }
    say(out, &report.render())?;
    if let Some(dir) = &opts.out {
        let json = serde_json::to_string_pretty(&report).expect("reports always serialize");
        write_atomic(&dir.join("reproduce.json"), json.as_bytes())?;
    }
    if report.passed() {
        Ok(report)
    } else {
        Err(CliError::Failed(report.failures()))
    }
}
