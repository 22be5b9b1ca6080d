use std::collections::BTreeMap;

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(ids: &[i64], times: &[i64], cols: &[(&str, Vec<Option<f64>>)]) -> RecipeData {
    let mut f = Frame::new();
    f.push("stay_id", ColumnData::Int(ids.to_vec())).unwrap();
    f.push("time", ColumnData::Int(times.to_vec())).unwrap();
    for (n, v) in cols {
        f.push(*n, ColumnData::Float(v.clone())).unwrap();
    }
    let preds = cols.iter().map(|(n, _)| n.to_string()).collect();
    RecipeData::new(f, "stay_id", Some("time"), preds).unwrap()
}

fn random_data(rng: &mut ChaCha8Rng, n_stays: i64) -> RecipeData {
    let mut ids = Vec::new();
    let mut times = Vec::new();
    for s in 0..n_stays {
        for h in 0..rng.gen_range(1..30) {
            ids.push(s);
            times.push(h);
        }
    }
    let cell = |rng: &mut ChaCha8Rng| rng.gen_bool(0.6).then(|| rng.gen_range(-50.0..50.0));
    let a = (0..ids.len()).map(|_| cell(rng)).collect();
    let b = (0..ids.len()).map(|_| cell(rng)).collect();
    data(&ids, &times, &[("a", a), ("b", b)])
}

fn fitted_scale(f: &FittedRecipe) -> (Vec<f64>, Vec<f64>) {
    match &f.steps[0] {
        FittedStep::Scale { mean, std, .. } => (mean.clone(), std.clone()),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn scale_uses_population_std() {
    let d = data(&[1, 1, 1], &[0, 1, 2], &[("x", vec![Some(1.0), Some(2.0), Some(3.0)])]);
    let f = Recipe::new(vec![Step::Scale { columns: None }]).fit(&d).unwrap();
    let (mean, std) = fitted_scale(&f);
    assert_eq!(mean, vec![2.0]);
    assert!((std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(Recipe::new(vec![Step::Scale { columns: None }]).fit(&d).unwrap(), f);
}

#[test]
fn constant_column_gets_unit_std() {
    let d = data(&[1, 1, 1], &[0, 1, 2], &[("x", vec![Some(5.0); 3])]);
    let f = Recipe::new(vec![Step::Scale { columns: None }]).fit(&d).unwrap();
    assert_eq!(fitted_scale(&f), (vec![5.0], vec![1.0]));
}

#[test]
fn scale_applies_train_statistics() {
    let f = FittedRecipe {
        steps: vec![FittedStep::Scale {
            columns: vec!["x".into()],
            mean: vec![2.0],
            std: vec![1.0],
        }],
    };
    let test = data(&[9], &[0], &[("x", vec![Some(3.0)])]);
    assert_eq!(f.apply(&test).unwrap().frame.float("x").unwrap(), &[Some(1.0)]);
}

#[test]
fn fill_then_impute() {
    let train = data(&[1, 1], &[0, 1], &[("x", vec![Some(10.0), Some(10.0)])]);
    let test = data(&[2, 2, 2, 2], &[0, 1, 2, 3], &[("x", vec![None, Some(4.0), None, None])]);
    let recipe = Recipe::new(vec![Step::ForwardFill { columns: None }, Step::MeanImpute { columns: None }]);
    let out = recipe.fit(&train).unwrap().apply(&test).unwrap();
    assert_eq!(out.frame.float("x").unwrap(), &[Some(10.0), Some(4.0), Some(4.0), Some(4.0)]);
}

#[test]
fn missing_indicator_marks_raw_gaps() {
    let d = data(&[1, 1, 1], &[0, 1, 2], &[("x", vec![None, Some(1.0), None])]);
    let out = Recipe::new(vec![Step::MissingIndicator { columns: None }])
        .fit(&d)
        .unwrap()
        .apply(&d)
        .unwrap();
    assert_eq!(out.frame.float("x_missing").unwrap(), &[Some(1.0), Some(0.0), Some(1.0)]);
    assert!(out.predictors.contains(&"x_missing".to_string()));
}

#[test]
fn forward_fill_stays_within_stay_and_is_idempotent() {
    let d = data(&[1, 1, 2, 2], &[0, 1, 0, 1], &[("x", vec![Some(3.0), None, None, Some(1.0)])]);
    let f = Recipe::new(vec![Step::ForwardFill { columns: None }]).fit(&d).unwrap();
    let once = f.apply(&d).unwrap();
    assert_eq!(once.frame.float("x").unwrap(), &[Some(3.0), Some(3.0), None, Some(1.0)]);
    assert_eq!(f.apply(&once).unwrap(), once);
}

#[test]
fn forward_fill_ignores_stay_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = random_data(&mut rng, 20);
    let f = Recipe::new(vec![Step::ForwardFill { columns: None }]).fit(&d).unwrap();
    let out = f.apply(&d).unwrap();
    // Relabel stays in reverse order; rows get re-sorted, values per stay must not change.
    let ids: Vec<i64> = d.ids().iter().map(|s| 1000 - s).collect();
    let mut frame = d.frame.clone();
    frame.set("stay_id", ColumnData::Int(ids)).unwrap();
    let shuffled = RecipeData::new(frame, "stay_id", Some("time"), d.predictors.clone()).unwrap();
    let out2 = f.apply(&shuffled).unwrap();
    for (s, range) in out.stays() {
        let other = out2.stays().into_iter().find(|(t, _)| *t == 1000 - s).unwrap().1;
        assert_eq!(out.frame.float("a").unwrap()[range], out2.frame.float("a").unwrap()[other]);
    }
}

#[test]
fn hist_aggregate_is_expanding() {
    let d = data(&[1, 1, 1, 1], &[0, 1, 2, 3], &[("x", vec![None, Some(4.0), Some(2.0), None])]);
    let out = Recipe::new(vec![Step::HistAggregate {
        columns: None,
        stats: HistStat::ALL.to_vec(),
    }])
    .fit(&d)
    .unwrap()
    .apply(&d)
    .unwrap();
    let f = &out.frame;
    assert_eq!(f.float("x_min_hist").unwrap(), &[None, Some(4.0), Some(2.0), Some(2.0)]);
    assert_eq!(f.float("x_max_hist").unwrap(), &[None, Some(4.0), Some(4.0), Some(4.0)]);
    assert_eq!(f.float("x_mean_hist").unwrap(), &[None, Some(4.0), Some(3.0), Some(3.0)]);
    assert_eq!(f.float("x_count_hist").unwrap(), &[Some(0.0), Some(1.0), Some(2.0), Some(2.0)]);
}

#[test]
fn default_chain_leaves_no_missing_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train = random_data(&mut rng, 30);
    let mut test = random_data(&mut rng, 10);
    // A column that is entirely missing in the test split.
    test.frame.set("b", ColumnData::Float(vec![None; test.frame.n_rows()])).unwrap();
    let recipe = Recipe::default_chain(&["a".into()], &["b".into()]);
    let fitted = recipe.fit(&train).unwrap();
    for d in [&train, &test] {
        let out = fitted.apply(d).unwrap();
        assert_eq!(out.missing_predictor_cells(), 0);
        assert_eq!(out.predictors.len(), 2 + 4 + 2);
    }
}

#[test]
fn statistics_come_from_train_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let all = random_data(&mut rng, 40);
    let recipe = Recipe::default_chain(&["a".into()], &["b".into()]);
    let train = all.filter_stays(|s| s < 30);
    let reference = recipe.fit(&train).unwrap();
    for _ in 0..20 {
        let mut mutated = all.clone();
        let ids = mutated.ids().to_vec();
        let col = mutated.frame.float_mut("a").unwrap();
        for (i, x) in col.iter_mut().enumerate() {
            if ids[i] >= 30 {
                *x = rng.gen_bool(0.5).then(|| rng.gen_range(-1e6..1e6));
            }
        }
        assert_eq!(recipe.fit(&mutated.filter_stays(|s| s < 30)).unwrap(), reference);
    }
}

#[test]
fn scale_inverse_recovers_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = random_data(&mut rng, 10);
    let f = Recipe::new(vec![Step::Scale { columns: None }]).fit(&d).unwrap();
    let back = f.inverse_scale(&f.apply(&d).unwrap()).unwrap();
    for p in &d.predictors {
        for (x, y) in d.frame.float(p).unwrap().iter().zip(back.frame.float(p).unwrap()) {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-300)),
                (None, None) => {}
                _ => panic!("mask changed"),
            }
        }
    }
}

#[test]
fn unseen_and_unknown_columns_fail() {
    let d = data(&[1], &[0], &[("x", vec![Some(1.0)])]);
    let err = Recipe::new(vec![Step::Scale {
        columns: Some(vec!["y".into()]),
    }])
    .fit(&d)
    .unwrap_err();
    assert!(matches!(err, RecipeError::UnknownColumn { .. }));
    let f = Recipe::new(vec![Step::Scale { columns: None }]).fit(&d).unwrap();
    let other = data(&[1], &[0], &[("z", vec![Some(1.0)])]);
    assert_eq!(f.apply(&other).unwrap_err(), RecipeError::UnseenColumn("x".into()));
}

#[test]
fn resample_rebins_sequence() {
    let d = data(&[1, 1, 1, 2], &[0, 1, 2, 0], &[("x", vec![Some(1.0), Some(3.0), None, Some(7.0)])]);
    let f = Recipe::new(vec![Step::Resample {
        width: 2,
        aggregates: BTreeMap::new(),
    }])
    .fit(&d)
    .unwrap();
    let out = f.apply(&d).unwrap();
    assert_eq!(out.times().unwrap(), &[0, 1, 0]);
    assert_eq!(out.frame.float("x").unwrap(), &[Some(2.0), None, Some(7.0)]);
    assert!(Recipe::new(vec![Step::Resample {
        width: 0,
        aggregates: BTreeMap::new()
    }])
    .fit(&d)
    .is_err());
}

#[test]
fn recipe_json_round_trip() {
    let r = Recipe::default_chain(&["hr".into()], &["age".into()]);
    assert_eq!(Recipe::from_json(&r.to_json()).unwrap(), r);
    let text = r#"{"steps":[{"step":"scale"},{"step":"resample","width":4,"aggregates":{"urine":"sum"}}]}"#;
    let parsed = Recipe::from_json(text).unwrap();
    assert_eq!(parsed.steps.len(), 2);
}


#[test]
fn hist_aggregate_ignores_future_bins() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = random_data(&mut rng, 100);
    let f = Recipe::default_chain(&["a".into(), "b".into()], &[]).fit(&d).unwrap();
    let full = f.apply(&d).unwrap();
    for (stay, range) in d.stays() {
        let cut = rng.gen_range(0..range.len()) as i64;
        let times = d.times().unwrap().to_vec();
        let truncated = d.filter_stays(|s| s == stay);
        let rows: Vec<usize> = (0..truncated.frame.n_rows()).filter(|&i| times[range.start + i] <= cut).collect();
        let truncated = RecipeData {
            frame: truncated.frame.take_rows(&rows),
            ..truncated
        };
        let part = f.apply(&truncated).unwrap();
        for p in &full.predictors {
            assert_eq!(&full.frame.float(p).unwrap()[range.start..range.start + rows.len()], part.frame.float(p).unwrap());
        }
    }
}
