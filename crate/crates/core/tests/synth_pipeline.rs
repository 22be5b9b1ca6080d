use icubench::cohort::{build_task_cohort, CohortOptions};
use icubench::labelers::TaskId;
use icubench::synthgen::{generate, SynthConfig, Violation, ViolationPlan, DATASET_NAME};

fn config() -> SynthConfig {
    SynthConfig {
        n_stays: 120,
        seed: 11,
        violations: ViolationPlan {
            age_under_18: 3,
            missing_discharge: 2,
            los_under_6h: 4,
            fewer_than_4_bins: 3,
            gap_over_12h: 5,
            los_under_30h: 6,
        },
        ..Default::default()
    }
}

#[test]
fn labelers_recover_planted_onsets() {
    let out = generate(&config()).unwrap();
    let opts = CohortOptions::default();
    let aki = build_task_cohort(&out.dataset, &out.dictionary, DATASET_NAME, TaskId::Aki, &opts).unwrap();
    let sepsis = build_task_cohort(&out.dataset, &out.dictionary, DATASET_NAME, TaskId::Sepsis, &opts).unwrap();
    let mut checked = 0;
    let base_kept = |v: Option<Violation>| v.is_none() || v == Some(Violation::LosUnder30h);
    for truth in out.truth.stays.iter().filter(|t| base_kept(t.violation)) {
        let a = &aki.labels[&truth.stay_id];
        assert_eq!(a.onset_time, truth.aki_onset, "aki stay {} ({:?})", truth.stay_id, truth.aki);
        let s = &sepsis.labels[&truth.stay_id];
        assert_eq!(s.onset_time, truth.sepsis_onset, "sepsis stay {} ({:?})", truth.stay_id, truth.sepsis);
        checked += 1;
    }
    assert_eq!(checked, 120 - 17);
}

#[test]
fn base_attrition_matches_plan() {
    let out = generate(&config()).unwrap();
    let cohort = build_task_cohort(
        &out.dataset,
        &out.dictionary,
        DATASET_NAME,
        TaskId::Mortality,
        &CohortOptions::default(),
    )
    .unwrap();
    let counts: Vec<(String, usize)> = cohort
        .attrition()
        .steps
        .iter()
        .map(|s| (s.criterion.clone(), s.n_excluded))
        .collect();
    let expected = [
        ("age_under_18", 3),
        ("missing_discharge", 2),
        ("los_under_6h", 4),
        ("fewer_than_4_bins", 3),
        ("gap_over_12h", 5),
        ("los_under_30h", 6),
    ];
    for (name, n) in expected {
        assert!(counts.contains(&(name.to_string(), n)), "{name}: {counts:?}");
    }
    assert_eq!(cohort.bundle.stay_ids().len(), 120 - 23);
}
