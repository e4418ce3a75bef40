//! Config-driven data generation and training, shared by the commands and
//! the reproduction suites.

use mib_core::checkpoint::Checkpoint;
use mib_core::model::SegModel;
use mib_core::synthdata::{
    annotate_pool, check_min_samples, generate_scenes, split_disjoint, split_overlapped, SplitReport,
};
use mib_core::training::{run_incremental, run_weak, CheckpointStore, Executor};
use mib_core::ClassSet;

use crate::config::{ExperimentConfig, Protocol};
use crate::error::{CliError, Result};
use crate::formats::Dataset;
use crate::records::MetricsRecord;

#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    /// Classes introduced by each step, background included.
    pub step_classes: Vec<ClassSet>,
    pub pool_size: usize,
    pub excluded: SplitReport,
}

/// Renders the training pool and test scenes and splits or annotates the
/// pool according to the protocol.
pub fn generate(cfg: &ExperimentConfig) -> Result<Generated> {
    let params = cfg.data.scene_params();
    let pool = generate_scenes(cfg.data.seed, cfg.data.train_scenes, &params)?;
    let test = generate_scenes(cfg.data.test_seed(), cfg.data.test_scenes, &params)?;
    let (steps, step_classes, excluded) = match cfg.run.protocol.weak_kind() {
        None => {
            let schedule = cfg.schedule()?.expect("validated incremental config has a schedule");
            let (steps, excluded) = match cfg.run.protocol {
                Protocol::Disjoint => split_disjoint(&pool, &schedule)?,
                _ => (split_overlapped(&pool, &schedule)?, SplitReport::default()),
            };
            check_min_samples(&steps, cfg.data.min_per_step)
                .map_err(|e| CliError::Config(format!("data.min_per_step: {e}")))?;
            (steps, schedule.steps().to_vec(), excluded)
        }
        Some(kind) => {
            let data = annotate_pool(&pool, kind, cfg.data.scribble_length, cfg.data.annotation_seed())?;
            (vec![data], vec![cfg.weak_classes()], SplitReport::default())
        }
    };
    Ok(Generated {
        dataset: Dataset { steps, test },
        step_classes,
        pool_size: pool.len(),
        excluded,
    })
}

/// Trains every step of the configured run. Checkpoints go to `store`;
/// returns one record per step and the final model.
pub fn train<S: CheckpointStore, E: Executor>(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    store: &mut S,
    exec: &E,
) -> Result<(Vec<MetricsRecord>, SegModel)> {
    if cfg.run.protocol.is_incremental() {
        let out = run_incremental(&cfg.incremental_config()?, &dataset.steps, &dataset.test, store, exec)?;
        let records = out.reports.iter().map(|r| MetricsRecord::new(cfg, r)).collect();
        Ok((records, out.model))
    } else {
        let [data] = dataset.steps.as_slice() else {
            return Err(CliError::Config(format!(
                "a weak-supervision dataset has one step, found {}",
                dataset.steps.len()
            )));
        };
        let out = run_weak(&cfg.weak_config()?, data, &dataset.test, exec)?;
        store.save(
            0,
            &Checkpoint {
                model: out.model.clone(),
                step: 0,
                seed: cfg.train.seed,
                config_digest: cfg.digest(),
            },
        )?;
        Ok((vec![MetricsRecord::new(cfg, &out.report)], out.model))
    }
}
