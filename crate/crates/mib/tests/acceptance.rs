//! The acceptance suite: ten checks run in order, each printing one
//! PASS/FAIL line. The test fails if any check fails.
//!
//! Run with `cargo test -p mib --test acceptance -- --nocapture` to see the
//! lines.

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mib::reproduce::{self, claims, run_scenario, Claim, Scenario};
use mib::store::DirStore;
use mib_core::checkpoint::Checkpoint;
use mib_core::gradcheck::{loss_suite, ABS_FLOOR, LOSS_REL_TOL};
use mib_core::losses::{self, aggregate_prob, renormalize_over, Distillation, LossConfig, LossReport, PointWeights};
use mib_core::model::{expand_head, Architecture, InitStrategy, ParamKind, SegModel};
use mib_core::numerics::softmax;
use mib_core::training::{lr_at, sgd_step, CheckpointStore, LrSchedule, OptimState, Serial};
use mib_core::{Annotation, ClassId, ClassSet, Grid, Mode};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn run_check(index: usize, name: &str, check: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Verdict::new(false, format!("panicked: {msg}"))
    });
    println!(
        "[{}] {index:>2}/10 {name} ({:.1}s): {}",
        if verdict.passed { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        verdict.detail
    );
    verdict.passed
}

#[test]
fn acceptance_suite() {
    let results = [
        run_check(1, "gradient oracles", gradient_oracles),
        run_check(2, "degenerate settings reduce to the standard losses", degenerate_settings),
        run_check(3, "background-split classifier init", background_split_init),
        run_check(4, "probability mass of folded and renormalized tables", probability_mass),
        run_check(5, "forgetting order on \"4-2\"", forgetting_order),
        run_check(6, "multi-step forgetting on \"4-1-1\"", multi_step_forgetting),
        run_check(7, "unlabeled-pixel term under weak supervision", weak_supervision),
        run_check(8, "byte-identical training records", training_determinism),
        run_check(9, "checkpoint round trip and frozen old model", checkpoint_round_trip),
        run_check(10, "polynomial learning-rate policy", lr_policy),
    ];
    let failed: Vec<usize> = (1..=10).filter(|&i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failed checks: {failed:?}");
}

fn gradient_oracles() -> Verdict {
    let start = Instant::now();
    let results = loss_suite(20_240_601, 20).expect("suite runs");
    let elapsed = start.elapsed();
    let mut detail = Vec::new();
    let mut passed = elapsed < Duration::from_secs(30);
    for r in &results {
        passed &= r.instances == 20 && r.worst.abs_floor == ABS_FLOOR && r.tolerance == LOSS_REL_TOL && r.passed();
        detail.push(format!(
            "{} rel {:.1e} abs {:.1e} ({}/{} above floor)",
            r.name, r.worst.max_relative_error, r.worst.max_abs_error, r.worst.above_floor, r.worst.entries
        ));
    }
    passed &= results.len() == 6;
    Verdict::new(passed, format!("{}; {:.1}s < 30s", detail.join(", "), elapsed.as_secs_f64()))
}

fn layout(k: u8) -> ClassSet {
    ClassSet::new((0..k).map(ClassId)).unwrap()
}

fn normal_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: f64) -> Grid {
    let data = (0..h * w * c)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Grid::from_vec(h, w, c, data).unwrap()
}

fn dense(rng: &mut ChaCha8Rng, h: usize, w: usize, k: u8) -> Annotation {
    let labels: Vec<ClassId> = (0..h * w).map(|_| ClassId(rng.random_range(0..k))).collect();
    Annotation::dense(h, w, &labels).unwrap()
}

fn max_gap(a: &LossReport, b: &LossReport) -> f64 {
    a.grad_logits
        .data()
        .iter()
        .zip(b.grad_logits.data())
        .map(|(x, y)| (x - y).abs())
        .fold((a.value - b.value).abs(), f64::max)
}

/// Random `h x w` instances over `k` classes, seeded.
fn instance_strategy() -> impl Strategy<Value = (u64, usize, usize, u8)> {
    (any::<u64>(), 1usize..6, 1usize..6, 2u8..8)
}

fn hundred_cases(
    name: &str,
    property: impl Fn(u64, usize, usize, u8) -> f64,
    tolerance: f64,
    worst: &mut Vec<String>,
) -> bool {
    let mut runner = TestRunner::new(Config {
        cases: 100,
        failure_persistence: None,
        ..Config::default()
    });
    let max = Cell::new(0.0f64);
    let cases = Cell::new(0usize);
    let outcome = runner.run(&instance_strategy(), |(seed, h, w, k)| {
        let gap = property(seed, h, w, k);
        max.set(max.get().max(gap));
        cases.set(cases.get() + 1);
        prop_assert!(gap <= tolerance, "{name}: gap {gap:e} for seed {seed} ({h}x{w}, {k} classes)");
        Ok(())
    });
    worst.push(format!("{name} max gap {:.1e}", max.get()));
    outcome.is_ok() && cases.get() >= 100
}

fn degenerate_settings() -> Verdict {
    let mut worst = Vec::new();
    let background = ClassSet::from_ids(&[0]).unwrap();
    let ok_ce = hundred_cases(
        "old={b}: mib_ce=ce",
        |seed, h, w, k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = normal_grid(&mut rng, h, w, k as usize, 3.0);
            let ann = dense(&mut rng, h, w, k);
            let a = losses::mib_ce(&z, &layout(k), &ann, &background).unwrap();
            let b = losses::ce_standard(&z, &layout(k), &ann).unwrap();
            max_gap(&a, &b)
        },
        1e-12,
        &mut worst,
    );
    let ok_kd = hundred_cases(
        "new={b}: mib_kd=kd",
        |seed, h, w, k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = normal_grid(&mut rng, h, w, k as usize, 3.0);
            let q_old = softmax(&normal_grid(&mut rng, h, w, k as usize, 3.0)).unwrap();
            let old = layout(k);
            let a = losses::mib_kd(&z, &old, &q_old, &old, &background).unwrap();
            let b = losses::kd_standard(&z, &old, &q_old, &old).unwrap();
            max_gap(&a, &b)
        },
        1e-12,
        &mut worst,
    );
    let ok_unl = hundred_cases(
        "no unlabeled pixel: unl=pce",
        |seed, h, w, k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = normal_grid(&mut rng, h, w, k as usize, 3.0);
            let ann = dense(&mut rng, h, w, k);
            let a = losses::unl(&z, &layout(k), &ann, &LossConfig::default(), Mode::Object).unwrap();
            let b = losses::pce(&z, &layout(k), &ann, &PointWeights::Uniform).unwrap();
            max_gap(&a, &b)
        },
        1e-12,
        &mut worst,
    );
    let ok_pce = hundred_cases(
        "full labels: pce=ce",
        |seed, h, w, k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = normal_grid(&mut rng, h, w, k as usize, 3.0);
            let ann = dense(&mut rng, h, w, k);
            let a = losses::pce(&z, &layout(k), &ann, &PointWeights::Uniform).unwrap();
            let b = losses::ce_standard(&z, &layout(k), &ann).unwrap();
            max_gap(&a, &b)
        },
        1e-12,
        &mut worst,
    );
    Verdict::new(ok_ce && ok_kd && ok_unl && ok_pce, worst.join(", "))
}

fn head_probs(model: &SegModel, features: &[f64]) -> Vec<f64> {
    let head = model.head();
    let logits: Vec<f64> = head
        .classes
        .iter()
        .map(|c| {
            let (w, b) = head.class_weights(c).unwrap();
            b + w.iter().zip(features).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect();
    let g = Grid::from_vec(1, 1, logits.len(), logits).unwrap();
    softmax(&g).unwrap().pixel(0).to_vec()
}

fn background_split_init() -> Verdict {
    let arch = Architecture {
        input_channels: 3,
        conv_channels: vec![6],
    };
    let old_classes = ClassSet::from_ids(&[0, 1, 2, 3]).unwrap();
    let mut old = SegModel::new(&arch, old_classes.clone(), 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for (kind, t) in old.tensors_mut() {
        if kind == ParamKind::Bias {
            t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
    }
    let mut max = 0.0f64;
    let mut vectors = 0;
    for size in [1usize, 2, 5] {
        let new_classes = ClassSet::new((0..size as u8).map(|i| if i == 0 { ClassId(0) } else { ClassId(3 + i) })).unwrap();
        let new = expand_head(&old, &new_classes, InitStrategy::Mib).unwrap();
        let layout = new.label_space().clone();
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
            let q_old = head_probs(&old, &x);
            let q_new = head_probs(&new, &x);
            let q_old_bg = q_old[0];
            for (k, c) in layout.iter().enumerate() {
                let expected = if new_classes.contains(c) {
                    q_old_bg / size as f64
                } else {
                    q_old[old_classes.position(c).unwrap()]
                };
                max = max.max((q_new[k] - expected).abs());
            }
            vectors += 1;
        }
    }
    Verdict::new(
        max <= 1e-12 && vectors == 300,
        format!("{vectors} feature vectors over |C|=1,2,5; max deviation {max:.1e}"),
    )
}

fn probability_mass() -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 100,
        failure_persistence: None,
        ..Config::default()
    });
    let (fold_gap, kd_gap, ukd_gap) = (Cell::new(0.0f64), Cell::new(0.0f64), Cell::new(0.0f64));
    let outcome = runner.run(&(instance_strategy(), any::<u64>()), |((seed, h, w, k), fold_bits)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = layout(k);
        let q = softmax(&normal_grid(&mut rng, h, w, k as usize, 4.0)).unwrap();

        let mut fold: Vec<ClassId> = full.iter().filter(|c| fold_bits >> c.0 & 1 == 1).collect();
        let target = ClassId(rng.random_range(0..k));
        fold.push(target);
        let fold = ClassSet::new(fold).unwrap();
        let (folded, _) = aggregate_prob(&q, &full, &fold, target).unwrap();
        for p in 0..q.pixels() {
            let before: f64 = q.pixel(p).iter().sum();
            let after: f64 = folded.pixel(p).iter().sum();
            fold_gap.set(fold_gap.get().max((before - after).abs()));
        }

        let split = rng.random_range(1..k);
        let old = ClassSet::new((0..split).map(ClassId)).unwrap();
        let new = ClassSet::new(std::iter::once(ClassId(0)).chain((split..k).map(ClassId))).unwrap();
        let kd = renormalize_over(&q, &full, &old).unwrap();
        let (ukd, ukd_layout) = aggregate_prob(&q, &full, &new, ClassId(0)).unwrap();
        prop_assert_eq!(&ukd_layout, &old);
        for p in 0..q.pixels() {
            kd_gap.set(kd_gap.get().max((kd.pixel(p).iter().sum::<f64>() - 1.0).abs()));
            ukd_gap.set(ukd_gap.get().max((ukd.pixel(p).iter().sum::<f64>() - 1.0).abs()));
        }
        prop_assert!(fold_gap.get() <= 1e-12 && kd_gap.get() <= 1e-9 && ukd_gap.get() <= 1e-9);
        Ok(())
    });
    Verdict::new(
        outcome.is_ok(),
        format!(
            "100 cases; fold mass gap {:.1e}, old-class sums off by {:.1e} (renormalized) and {:.1e} (folded)",
            fold_gap.get(),
            kd_gap.get(),
            ukd_gap.get()
        ),
    )
}

fn scenario_verdict(scenarios: &[Scenario], budget: Duration) -> Verdict {
    let start = Instant::now();
    let mut all: Vec<Claim> = Vec::new();
    let mut tables = Vec::new();
    for s in scenarios {
        let outcome = run_scenario(s, &Serial).expect("scenario runs");
        tables.push(format!("{} in {:.0}s", s.name, outcome.seconds));
        all.extend(claims(&outcome));
    }
    let elapsed = start.elapsed();
    let passed = !all.is_empty() && all.iter().all(|c| c.passed) && elapsed <= budget;
    let lines: Vec<String> = all
        .iter()
        .map(|c| format!("{}{}: {}", if c.passed { "" } else { "NOT " }, c.scenario, c.statement))
        .collect();
    Verdict::new(
        passed,
        format!(
            "{}; {} ({:.0}s of {}s)",
            lines.join("; "),
            tables.join(", "),
            elapsed.as_secs_f64(),
            budget.as_secs()
        ),
    )
}

fn forgetting_order() -> Verdict {
    scenario_verdict(&reproduce::forgetting_scenarios(), Duration::from_secs(600))
}

fn multi_step_forgetting() -> Verdict {
    scenario_verdict(&[reproduce::multi_step_scenario()], Duration::from_secs(900))
}

fn weak_supervision() -> Verdict {
    scenario_verdict(&reproduce::weak_scenarios(), Duration::from_secs(600))
}

const TINY_CONFIG: &str = r#"{
    "schema_version": 1,
    "data": {"seed": 4, "train_scenes": 60, "test_scenes": 10, "height": 32, "width": 32, "min_per_step": 5},
    "run": {"protocol": "disjoint", "method": "mib", "schedule": "4-2"},
    "train": {"arch": {"input_channels": 3, "conv_channels": [4, 4]}, "epochs": 2, "lr_first": 0.1, "lr_later": 0.01, "seed": 9},
    "paths": {"dataset": "data", "output": "run"}
}"#;

fn mib(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mib"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn training_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY_CONFIG).unwrap();
    let generate = mib(dir.path(), &["--config", "tiny.json", "generate"]);
    assert!(generate.status.success(), "{}", String::from_utf8_lossy(&generate.stderr));
    for out in ["a", "b"] {
        let run = mib(dir.path(), &["--config", "tiny.json", "--threads", "1", "--out", out, "train"]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let a = mib::formats::list_files(&dir.path().join("a/metrics")).unwrap();
    let b = mib::formats::list_files(&dir.path().join("b/metrics")).unwrap();
    let mut identical = a == b && a.len() == 2;
    for f in &a {
        let x = std::fs::read(dir.path().join("a/metrics").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b/metrics").join(f)).unwrap();
        identical &= !x.is_empty() && x == y;
    }
    for step in ["step_00.ckpt", "step_01.ckpt"] {
        let x = std::fs::read(dir.path().join("a/checkpoints").join(step)).unwrap();
        let y = std::fs::read(dir.path().join("b/checkpoints").join(step)).unwrap();
        identical &= x == y;
    }
    Verdict::new(
        identical,
        format!("two runs, {} record files and 2 checkpoints compared byte for byte", a.len()),
    )
}

fn checkpoint_round_trip() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture {
        input_channels: 3,
        conv_channels: vec![8, 8],
    };
    let old_classes = ClassSet::from_ids(&[0, 1, 2]).unwrap();
    let mut model = SegModel::new(&arch, old_classes.clone(), 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    for (_, t) in model.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let ckpt = Checkpoint {
        model,
        step: 0,
        seed: 77,
        config_digest: [5; 32],
    };
    let mut store = DirStore::new(dir.path());
    store.save(0, &ckpt).unwrap();
    let loaded = store.load(0).unwrap();
    let probe = Grid::from_vec(
        12,
        10,
        3,
        (0..12 * 10 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let before = ckpt.model.logits(&probe).unwrap();
    let after = loaded.model.logits(&probe).unwrap();
    let bit_exact = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let old = loaded.model;
    let frozen_bits: Vec<u64> = old.params_flat().iter().map(|v| v.to_bits()).collect();
    let frozen_print = old.fingerprint();
    let new_classes = ClassSet::from_ids(&[0, 3]).unwrap();
    let mut current = expand_head(&old, &new_classes, InitStrategy::Mib).unwrap();
    let layout = current.label_space().clone();
    let probs_old = softmax(&old.logits(&probe).unwrap()).unwrap();
    let labels: Vec<ClassId> = (0..probe.pixels()).map(|_| ClassId(if rng.random_bool(0.3) { 3 } else { 0 })).collect();
    let ann = Annotation::dense(12, 10, &labels).unwrap();
    let (z, cache) = current.forward(&probe).unwrap();
    let report = losses::objective_incremental(
        &z,
        &layout,
        &ann,
        Some(Distillation {
            probs_old: &probs_old,
            old_classes: &old_classes,
            new_classes: &new_classes,
        }),
        &LossConfig::default(),
    )
    .unwrap();
    let grads = current.backward(&cache, &report.grad_logits).unwrap();
    let mut optim = OptimState::new(&current, 0.9, 1e-4, false).unwrap();
    let moved_from = current.params_flat();
    sgd_step(&mut current, &grads, &mut optim, 0.01).unwrap();
    let trained = current.params_flat() != moved_from;
    let old_bits: Vec<u64> = old.params_flat().iter().map(|v| v.to_bits()).collect();
    let on_disk: Vec<u64> = store.load(0).unwrap().model.params_flat().iter().map(|v| v.to_bits()).collect();
    let frozen = old_bits == frozen_bits && old.fingerprint() == frozen_print && on_disk == frozen_bits;
    Verdict::new(
        bit_exact && trained && frozen,
        format!(
            "{} probe logits bit-exact: {bit_exact}; distillation step moved the new model: {trained}; old model unchanged: {frozen}",
            before.data().len()
        ),
    )
}

fn lr_policy() -> Verdict {
    let mut max = 0.0f64;
    for (base_lr, max_iterations) in [(0.01, 1000usize), (1e-3, 30_000), (0.1, 7), (0.007, 2)] {
        let s = LrSchedule {
            base_lr,
            max_iterations,
            power: 0.9,
        };
        for i in [0, max_iterations / 2, max_iterations] {
            let expected = base_lr * (1.0 - i as f64 / max_iterations as f64).powf(0.9);
            max = max.max((lr_at(&s, i).unwrap() - expected).abs());
        }
    }
    Verdict::new(max <= 1e-12, format!("4 schedules at i = 0, max/2, max; max deviation {max:.1e}"))
}
