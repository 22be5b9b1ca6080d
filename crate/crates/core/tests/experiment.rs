use std::path::Path;

use icubench::cohort::{read_cohort, CohortFormat};
use icubench::experiment::{
    load_cohort, run_evaluate, run_extract, run_pooled, run_train, CvConfig, ExperimentConfig, PooledConfig,
    PooledSource, ResultRecord, RESULTS_FILE,
};
use icubench::labelers::TaskId;
use icubench::models::ModelKind;
use icubench::recipes::{Recipe, RecipeData};
use icubench::synthgen::{generate, SynthConfig};
use serde_json::Value;

fn write_synth(dir: &Path, n: usize, seed: u64, shift: f64) {
    let cfg = SynthConfig {
        n_stays: n,
        seed,
        feature_shift: shift,
        los_mean_extra_hours: 24.0,
        ..Default::default()
    };
    generate(&cfg).unwrap().write(dir).unwrap();
}

fn small_cv() -> CvConfig {
    CvConfig {
        folds: 3,
        repetitions: 2,
        folds_to_tune: 2,
        n_init: 3,
        n_calls: 5,
        workers: 1,
    }
}

fn config(data: &Path, logs: &Path, task: TaskId, model: ModelKind) -> ExperimentConfig {
    ExperimentConfig {
        data_dir: data.to_path_buf(),
        dataset: "synth".into(),
        task,
        model,
        cv: small_cv(),
        seed: 2222,
        log_dir: logs.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn train_is_reproducible_and_consistent_with_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("a");
    write_synth(&data, 120, 1, 0.0);
    let mut cfg = config(&data, &tmp.path().join("logs"), TaskId::Mortality, ModelKind::LogisticRegression);
    cfg.tune = true;
    let first = run_train(&cfg).unwrap();
    let second = run_train(&cfg).unwrap();
    assert_ne!(first.dir, second.dir);
    assert_eq!(first.record.folds.len(), 6);
    assert_eq!(first.record.aggregate, first.record.recompute_aggregate());
    let a = std::fs::read_to_string(first.dir.join(RESULTS_FILE)).unwrap();
    let b = std::fs::read_to_string(second.dir.join(RESULTS_FILE)).unwrap();
    assert_eq!(a, b);
    let parsed = ResultRecord::from_json(&a).unwrap();
    assert_eq!(parsed.folds, first.record.folds);
    assert!(first.dir.join("trials.jsonl").exists());

    let eval = run_evaluate(&cfg, &first.dir, "a").unwrap();
    for (t, e) in first.record.folds.iter().zip(&eval.record.folds) {
        assert_eq!((t.repetition, t.fold), (e.repetition, e.fold));
        assert_eq!(t.metrics, e.metrics);
    }
}

#[test]
fn shifted_target_is_evaluated_with_source_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_synth(&a, 90, 2, 0.0);
    write_synth(&b, 90, 3, 1.0);
    let logs = tmp.path().join("logs");
    let src = run_train(&config(&a, &logs, TaskId::Mortality, ModelKind::LogisticRegression)).unwrap();
    let target = config(&b, &logs, TaskId::Mortality, ModelKind::LogisticRegression);
    let out = run_evaluate(&target, &src.dir, "a").unwrap();
    assert_eq!(out.record.folds.len(), 6);
    assert!(out.record.folds.iter().all(|f| f.metrics["auroc"].is_finite()));
    assert_eq!(out.record.source.as_ref().unwrap().name, "a");
}

#[test]
fn target_labels_do_not_reach_preprocessing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("a");
    write_synth(&data, 40, 4, 0.0);
    let cfg = config(&data, tmp.path(), TaskId::Mortality, ModelKind::LogisticRegression);
    let bundle = load_cohort(&cfg).unwrap().bundle;
    let mut permuted = bundle.clone();
    let labels: Vec<Option<f64>> = bundle.outcome.float("label").unwrap().iter().rev().copied().collect();
    permuted.outcome.set("label", icubench::frame::ColumnData::Float(labels)).unwrap();
    let recipe = Recipe::default_chain(&bundle.vars.dynamic, &bundle.vars.statics)
        .fit(&RecipeData::from_bundle(&bundle).unwrap())
        .unwrap();
    let x = recipe.apply(&RecipeData::from_bundle(&bundle).unwrap()).unwrap();
    let y = recipe.apply(&RecipeData::from_bundle(&permuted).unwrap()).unwrap();
    assert_eq!(x, y);
}

#[test]
fn gbt_and_elastic_net_run_on_hourly_and_regression_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("a");
    write_synth(&data, 60, 5, 0.0);
    let logs = tmp.path().join("logs");
    let mut gbt = config(&data, &logs, TaskId::Aki, ModelKind::Gbt);
    gbt.cv.repetitions = 1;
    gbt.hyperparams.insert("min_child_samples".into(), Value::from(20));
    gbt.hyperparams.insert("n_estimators".into(), Value::from(30));
    let out = run_train(&gbt).unwrap();
    assert_eq!(out.record.folds.len(), 3);
    assert!(out.record.folds.iter().all(|f| f.n_test > 60));

    let mut en = config(&data, &logs, TaskId::Los, ModelKind::ElasticNet);
    en.cv.repetitions = 1;
    let out = run_train(&en).unwrap();
    assert!(out.record.aggregate["mae"].mean > 0.0);
}

#[test]
fn extracted_and_cached_cohorts_match_raw_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("a");
    write_synth(&data, 60, 6, 0.0);
    let logs = tmp.path().join("logs");
    let mut cfg = config(&data, &logs, TaskId::Mortality, ModelKind::LogisticRegression);
    cfg.generate_cache = true;
    let raw = run_train(&cfg).unwrap();

    let cohort_dir = tmp.path().join("cohort");
    run_extract(&cfg, &cohort_dir, CohortFormat::Csv).unwrap();
    read_cohort(&cohort_dir).unwrap();
    let mut from_dir = cfg.clone();
    from_dir.data_dir = cohort_dir;
    from_dir.generate_cache = false;
    let extracted = run_train(&from_dir).unwrap();

    let mut cached = cfg.clone();
    cached.generate_cache = false;
    cached.load_cache = true;
    let cached = run_train(&cached).unwrap();
    for other in [&extracted, &cached] {
        assert_eq!(raw.record.folds, other.record.folds);
        assert_eq!(raw.record.attrition, other.record.attrition);
    }
}

#[test]
fn pooled_training_uses_equal_subsamples() {
    let tmp = tempfile::tempdir().unwrap();
    let mut sources = Vec::new();
    for (i, name) in ["a", "b", "c"].iter().enumerate() {
        let dir = tmp.path().join(name);
        write_synth(&dir, 40 + 20 * i, 10 + i as u64, 0.3 * i as f64);
        sources.push(PooledSource {
            name: name.to_string(),
            data_dir: dir,
        });
    }
    let mut cfg = config(tmp.path(), &tmp.path().join("logs"), TaskId::Mortality, ModelKind::LogisticRegression);
    cfg.pooled = Some(PooledConfig {
        sources,
        holdout: "b".into(),
        stays_per_dataset: Some(30),
    });
    let out = run_pooled(&cfg).unwrap();
    assert_eq!(out.record.folds.len(), 1);
    assert_eq!(out.record.folds[0].n_train, 48);
    assert_eq!(out.record.folds[0].n_test, 60);

    cfg.pooled.as_mut().unwrap().holdout = "z".into();
    assert_eq!(run_pooled(&cfg).unwrap_err().exit_code(), 2);
}
