//! Seeded synthetic ICU datasets with planted labels.
//!
//! The generator writes a small multi-table source (stays, measurements,
//! antibiotics, cultures) together with a concept dictionary that maps it onto
//! the standard concepts, and a ground-truth record of what was planted: AKI
//! and sepsis onsets, near misses that must not fire, stays violating one
//! exclusion criterion each, and the true mortality probability of every stay.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::MINUTES_PER_BIN;
use crate::harmonize::{
    Aggregate, Callback, ColumnSpec, ColumnType, ConceptClass, ConceptDef, ConceptDictionary, Dataset,
    HarmonizeError, IdLevel, ItemId, RawColumn, RawTable, SourceConfig, SourceItem, TableDefaults, TableSpec,
    TimeUnit,
};
use crate::tuner::sub_seed;

pub const DATASET_NAME: &str = "synth";
pub const CONCEPTS_FILE: &str = "concepts.json";
pub const TRUTH_FILE: &str = "truth.json";

/// Concepts driving the mortality risk, in coefficient order.
pub const MORTALITY_FEATURES: [&str; 5] = ["age", "hr", "map", "resp", "temp"];

const SOFA_ITEM: i64 = 2000;
const HOUR: i64 = MINUTES_PER_BIN;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Harmonize(#[from] HarmonizeError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MortalityModel {
    pub intercept: f64,
    /// One coefficient per standardized latent in [`MORTALITY_FEATURES`].
    pub coefficients: [f64; 5],
    /// Within-stay noise of the signal vitals, in units of their between-stay sd.
    pub noise: f64,
}

impl Default for MortalityModel {
    fn default() -> Self {
        MortalityModel {
            intercept: -2.0,
            coefficients: [2.4, 2.0, -2.0, 1.6, -1.6],
            noise: 0.15,
        }
    }
}

/// Fractions of eligible stays receiving each AKI plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AkiPlan {
    pub creatinine: f64,
    pub creatinine_near_miss: f64,
    pub urine: f64,
    pub urine_near_miss: f64,
}

impl Default for AkiPlan {
    fn default() -> Self {
        AkiPlan {
            creatinine: 0.1,
            creatinine_near_miss: 0.05,
            urine: 0.1,
            urine_near_miss: 0.05,
        }
    }
}

/// Fractions of eligible stays receiving each sepsis plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SepsisPlan {
    pub positive: f64,
    /// Antibiotics and cultures but a SOFA rise of one point.
    pub sofa_near_miss: f64,
    /// SOFA rise and antibiotics, no culture.
    pub no_culture: f64,
    /// Culture drawn too long before the antibiotics.
    pub early_culture: f64,
    /// Two doses only: suspicion fails the continuity requirement.
    pub short_course: f64,
    /// Full suspicion without organ dysfunction.
    pub suspicion_only: f64,
}

impl Default for SepsisPlan {
    fn default() -> Self {
        SepsisPlan {
            positive: 0.1,
            sofa_near_miss: 0.04,
            no_culture: 0.04,
            early_culture: 0.04,
            short_course: 0.04,
            suspicion_only: 0.04,
        }
    }
}

/// Exact number of stays violating each exclusion criterion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViolationPlan {
    pub age_under_18: usize,
    pub missing_discharge: usize,
    pub los_under_6h: usize,
    pub fewer_than_4_bins: usize,
    pub gap_over_12h: usize,
    /// Eligible for the base cohort, excluded from mortality.
    pub los_under_30h: usize,
}

impl ViolationPlan {
    fn entries(&self) -> [(Violation, usize); 6] {
        [
            (Violation::AgeUnder18, self.age_under_18),
            (Violation::MissingDischarge, self.missing_discharge),
            (Violation::LosUnder6h, self.los_under_6h),
            (Violation::FewerThan4Bins, self.fewer_than_4_bins),
            (Violation::GapOver12h, self.gap_over_12h),
            (Violation::LosUnder30h, self.los_under_30h),
        ]
    }

    pub fn total(&self) -> usize {
        self.entries().iter().map(|(_, n)| n).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_stays: usize,
    pub seed: u64,
    pub los_min_hours: f64,
    /// Mean of the exponential excess over `los_min_hours`.
    pub los_mean_extra_hours: f64,
    pub los_max_hours: f64,
    pub lab_interval_hours: i64,
    pub lab_missing_rate: f64,
    pub vital_missing_rate: f64,
    /// AR(1) coefficient of hourly fluctuations.
    pub ar_coefficient: f64,
    /// Within-stay sd of non-signal features, relative to their population sd.
    pub noise_scale: f64,
    /// Shift of every dynamic feature mean, in population sds.
    pub feature_shift: f64,
    pub mortality: MortalityModel,
    pub aki: AkiPlan,
    pub sepsis: SepsisPlan,
    pub violations: ViolationPlan,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_stays: 1000,
            seed: 0,
            los_min_hours: 36.0,
            los_mean_extra_hours: 48.0,
            los_max_hours: 400.0,
            lab_interval_hours: 8,
            lab_missing_rate: 0.2,
            vital_missing_rate: 0.05,
            ar_coefficient: 0.6,
            noise_scale: 0.3,
            feature_shift: 0.0,
            mortality: MortalityModel::default(),
            aki: AkiPlan::default(),
            sepsis: SepsisPlan::default(),
            violations: ViolationPlan::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.violations.total() > self.n_stays {
            return bad(format!(
                "{} planned violations exceed {} stays",
                self.violations.total(),
                self.n_stays
            ));
        }
        if !(self.los_min_hours >= 36.0) {
            return bad("los_min_hours must be at least 36".into());
        }
        if !(self.los_max_hours >= self.los_min_hours) || !(self.los_mean_extra_hours >= 0.0) {
            return bad("length-of-stay range is empty".into());
        }
        if self.lab_interval_hours < 1 {
            return bad("lab_interval_hours must be positive".into());
        }
        for (name, p) in [
            ("lab_missing_rate", self.lab_missing_rate),
            ("vital_missing_rate", self.vital_missing_rate),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.ar_coefficient.abs() < 1.0) || !(self.noise_scale >= 0.0) || !self.feature_shift.is_finite() {
            return bad("noise parameters out of range".into());
        }
        let a = &self.aki;
        let s = &self.sepsis;
        for (what, total) in [
            ("aki", a.creatinine + a.creatinine_near_miss + a.urine + a.urine_near_miss),
            (
                "sepsis",
                s.positive + s.sofa_near_miss + s.no_culture + s.early_culture + s.short_course + s.suspicion_only,
            ),
        ] {
            if !(0.0..=1.0).contains(&total) {
                return bad(format!("{what} plan fractions must be non-negative and sum to at most 1"));
            }
        }
        for f in [a.creatinine, a.creatinine_near_miss, a.urine, a.urine_near_miss] {
            if f < 0.0 {
                return bad("aki plan fractions must be non-negative".into());
            }
        }
        for f in [s.positive, s.sofa_near_miss, s.no_culture, s.early_culture, s.short_course, s.suspicion_only] {
            if f < 0.0 {
                return bad("sepsis plan fractions must be non-negative".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    AgeUnder18,
    MissingDischarge,
    LosUnder6h,
    FewerThan4Bins,
    GapOver12h,
    LosUnder30h,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AkiKind {
    #[default]
    None,
    Creatinine,
    CreatinineNearMiss,
    Urine,
    UrineNearMiss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SepsisKind {
    #[default]
    None,
    Positive,
    SofaNearMiss,
    NoCulture,
    EarlyCulture,
    ShortCourse,
    SuspicionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayTruth {
    pub stay_id: i64,
    pub patient_id: i64,
    pub violation: Option<Violation>,
    pub age: f64,
    pub los_minutes: i64,
    pub died: bool,
    pub mortality_probability: f64,
    pub aki: AkiKind,
    /// Stay-relative minute of the first KDIGO stage >= 1.
    pub aki_onset: Option<i64>,
    pub sepsis: SepsisKind,
    /// Stay-relative minute of the sepsis onset hour with a 3-day antibiotic
    /// continuity requirement.
    pub sepsis_onset: Option<i64>,
    /// Same without a continuity requirement.
    pub sepsis_onset_any_course: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dataset: String,
    pub config: SynthConfig,
    pub stays: Vec<StayTruth>,
    pub violation_counts: BTreeMap<Violation, usize>,
    /// Expected AUROC of the true risk over stays without violations.
    pub bayes_ceiling_auroc: Option<f64>,
}

impl GroundTruth {
    pub fn stay(&self, stay_id: i64) -> Option<&StayTruth> {
        self.stays.iter().find(|s| s.stay_id == stay_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub dictionary: ConceptDictionary,
    pub truth: GroundTruth,
}

impl SynthOutput {
    /// Writes the source tables, `concepts.json` and `truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        self.dataset.write(dir)?;
        for (file, text) in [
            (CONCEPTS_FILE, self.dictionary.to_json()),
            (TRUTH_FILE, self.truth.to_json()),
        ] {
            let path = dir.join(file);
            std::fs::write(&path, text).map_err(|source| SynthError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Expected AUROC of a scorer that knows the true probabilities: the chance
/// that a random positive outranks a random negative, averaged over outcomes.
pub fn bayes_ceiling_auroc(probs: &[f64]) -> Option<f64> {
    let mut p: Vec<f64> = probs.to_vec();
    p.sort_by(f64::total_cmp);
    // Pairs (i positive, j negative) with p_i > p_j count fully, ties half.
    let (mut num, mut den) = (0.0, 0.0);
    let total_neg: f64 = p.iter().map(|q| 1.0 - q).sum();
    let mut below_neg = 0.0;
    let mut i = 0;
    while i < p.len() {
        let mut j = i;
        while j < p.len() && p[j] == p[i] {
            j += 1;
        }
        let tie_neg: f64 = p[i..j].iter().map(|q| 1.0 - q).sum();
        for &q in &p[i..j] {
            // Exclude the stay itself from its tie group.
            let tie_other = tie_neg - (1.0 - q);
            num += q * (below_neg + 0.5 * tie_other);
            den += q * (total_neg - (1.0 - q));
        }
        below_neg += tie_neg;
        i = j;
    }
    (den > 0.0).then(|| num / den)
}

struct FeatureSpec {
    name: &'static str,
    unit: &'static str,
    mean: f64,
    sd: f64,
    min: f64,
    max: f64,
    vital: bool,
}

const fn fs(name: &'static str, unit: &'static str, mean: f64, sd: f64, min: f64, max: f64, vital: bool) -> FeatureSpec {
    FeatureSpec {
        name,
        unit,
        mean,
        sd,
        min,
        max,
        vital,
    }
}

// Population distributions of the dynamic concepts. `crea` and `urine` follow
// their own processes and only use the bounds here.
const FEATURES: [FeatureSpec; 48] = [
    fs("alb", "g/dL", 3.0, 0.6, 0.5, 6.0, false),
    fs("alp", "IU/L", 100.0, 50.0, 5.0, 2000.0, false),
    fs("alt", "IU/L", 40.0, 30.0, 1.0, 5000.0, false),
    fs("ast", "IU/L", 45.0, 35.0, 1.0, 5000.0, false),
    fs("be", "mEq/L", 0.0, 4.0, -30.0, 30.0, false),
    fs("bicar", "mEq/L", 24.0, 4.0, 5.0, 50.0, false),
    fs("bili", "mg/dL", 1.0, 0.6, 0.1, 40.0, false),
    fs("bili_dir", "mg/dL", 0.4, 0.3, 0.01, 30.0, false),
    fs("bnd", "%", 5.0, 3.0, 0.0, 50.0, false),
    fs("bun", "mg/dL", 20.0, 10.0, 1.0, 200.0, false),
    fs("ca", "mg/dL", 8.5, 0.7, 4.0, 15.0, false),
    fs("cai", "mmol/L", 1.15, 0.1, 0.5, 2.0, false),
    fs("ck", "IU/L", 150.0, 100.0, 5.0, 50000.0, false),
    fs("ckmb", "ng/mL", 4.0, 3.0, 0.1, 500.0, false),
    fs("cl", "mEq/L", 103.0, 5.0, 70.0, 140.0, false),
    fs("crea", "mg/dL", 0.85, 0.15, 0.1, 20.0, false),
    fs("crp", "mg/L", 60.0, 40.0, 0.1, 500.0, false),
    fs("dbp", "mmHg", 60.0, 10.0, 10.0, 200.0, true),
    fs("fgn", "mg/dL", 350.0, 100.0, 30.0, 1500.0, false),
    fs("fio2", "%", 40.0, 10.0, 21.0, 100.0, false),
    fs("glu", "mg/dL", 130.0, 30.0, 20.0, 1000.0, false),
    fs("hgb", "g/dL", 10.0, 1.5, 3.0, 20.0, false),
    fs("hr", "bpm", 85.0, 15.0, 20.0, 250.0, true),
    fs("inr_pt", "", 1.2, 0.2, 0.5, 10.0, false),
    fs("k", "mEq/L", 4.1, 0.4, 1.5, 9.0, false),
    fs("lact", "mmol/L", 1.8, 0.8, 0.1, 30.0, false),
    fs("lymph", "%", 12.0, 6.0, 0.0, 100.0, false),
    fs("map", "mmHg", 80.0, 12.0, 20.0, 200.0, true),
    fs("mch", "pg", 30.0, 2.0, 15.0, 50.0, false),
    fs("mchc", "%", 33.0, 1.5, 20.0, 45.0, false),
    fs("mcv", "fL", 90.0, 5.0, 50.0, 140.0, false),
    fs("methb", "%", 1.0, 0.4, 0.0, 20.0, false),
    fs("mg", "mg/dL", 2.0, 0.2, 0.5, 5.0, false),
    fs("na", "mEq/L", 139.0, 4.0, 110.0, 170.0, false),
    fs("neut", "%", 75.0, 10.0, 0.0, 100.0, false),
    fs("o2sat", "%", 95.0, 2.0, 50.0, 100.0, true),
    fs("pco2", "mmHg", 40.0, 6.0, 10.0, 150.0, false),
    fs("ph", "", 7.38, 0.05, 6.8, 7.8, false),
    fs("phos", "mg/dL", 3.5, 0.8, 0.5, 15.0, false),
    fs("plt", "K/uL", 200.0, 70.0, 5.0, 1500.0, false),
    fs("po2", "mmHg", 100.0, 25.0, 20.0, 600.0, false),
    fs("ptt", "sec", 35.0, 8.0, 10.0, 200.0, false),
    fs("resp", "insp/min", 18.0, 4.0, 2.0, 80.0, true),
    fs("sbp", "mmHg", 120.0, 18.0, 30.0, 300.0, true),
    fs("temp", "C", 37.0, 0.6, 30.0, 43.0, true),
    fs("tnt", "ng/mL", 0.05, 0.03, 0.0, 50.0, false),
    fs("urine", "mL", 100.0, 50.0, 0.0, 2000.0, true),
    fs("wbc", "K/uL", 10.0, 3.0, 0.1, 200.0, false),
];

const AGE_MEAN: f64 = 63.0;
const AGE_SD: f64 = 14.0;

fn item_id(k: usize) -> i64 {
    1000 + k as i64
}

fn feature_index(name: &str) -> usize {
    FEATURES.iter().position(|f| f.name == name).expect("known feature")
}

fn col(name: &str, spec: ColumnType) -> ColumnSpec {
    ColumnSpec {
        name: name.to_string(),
        spec,
    }
}

fn table(files: &str, index_var: Option<&str>, val_var: Option<&str>, cols: &[(&str, ColumnType)]) -> TableSpec {
    TableSpec {
        files: files.to_string(),
        defaults: TableDefaults {
            index_var: index_var.map(String::from),
            time_vars: index_var.map(|v| vec![v.to_string()]).unwrap_or_default(),
            val_var: val_var.map(String::from),
        },
        cols: cols.iter().map(|(n, s)| (n.to_string(), col(n, *s))).collect(),
    }
}

/// Table layout of the synthetic source.
pub fn source_config() -> SourceConfig {
    use ColumnType::*;
    let mut tables = BTreeMap::new();
    tables.insert(
        "stays".to_string(),
        table(
            "stays.csv",
            Some("intime"),
            None,
            &[
                ("stay_id", Integer),
                ("patient_id", Integer),
                ("intime", Integer),
                ("outtime", Integer),
                ("age", Double),
                ("sex", Character),
                ("height", Double),
                ("weight", Double),
                ("died", Logical),
            ],
        ),
    );
    tables.insert(
        "measurements".to_string(),
        table(
            "measurements.csv",
            Some("charttime"),
            Some("value"),
            &[("stay_id", Integer), ("itemid", Integer), ("charttime", Integer), ("value", Double)],
        ),
    );
    tables.insert(
        "abx".to_string(),
        table(
            "abx.csv",
            Some("starttime"),
            None,
            &[("stay_id", Integer), ("starttime", Integer), ("drug", Character)],
        ),
    );
    tables.insert(
        "cultures".to_string(),
        table(
            "cultures.csv",
            Some("charttime"),
            None,
            &[("stay_id", Integer), ("charttime", Integer), ("specimen", Character)],
        ),
    );
    let mut id_cfg = BTreeMap::new();
    id_cfg.insert(
        "patient".to_string(),
        IdLevel {
            id: "patient_id".into(),
            position: 1,
            start: "intime".into(),
            end: None,
            table: "stays".into(),
        },
    );
    id_cfg.insert(
        "icustay".to_string(),
        IdLevel {
            id: "stay_id".into(),
            position: 2,
            start: "intime".into(),
            end: Some("outtime".into()),
            table: "stays".into(),
        },
    );
    SourceConfig {
        name: DATASET_NAME.into(),
        time_unit: TimeUnit::Minutes,
        id_cfg,
        tables,
    }
}

fn item(table: &str) -> SourceItem {
    SourceItem {
        table: table.into(),
        sub_var: None,
        ids: None,
        regex: None,
        val_var: None,
        index_var: None,
        unit_scale: None,
        callback: None,
        stop_var: None,
        grp_var: None,
        class: None,
    }
}

fn concept(
    class: ConceptClass,
    category: &str,
    unit: Option<&str>,
    aggregate: Aggregate,
    bounds: Option<(f64, f64)>,
    src: SourceItem,
) -> ConceptDef {
    ConceptDef {
        name: String::new(),
        description: String::new(),
        category: category.into(),
        unit: unit.filter(|u| !u.is_empty()).map(String::from),
        aggregate: Some(aggregate),
        plausible_min: bounds.map(|b| b.0),
        plausible_max: bounds.map(|b| b.1),
        class,
        levels: None,
        target: None,
        sources: BTreeMap::from([(DATASET_NAME.to_string(), vec![src])]),
    }
}

/// Concept dictionary mapping the synthetic source onto the standard concepts.
pub fn concept_dictionary() -> ConceptDictionary {
    let mut dict = ConceptDictionary::default();
    let measured = |id: i64| SourceItem {
        sub_var: Some("itemid".into()),
        ids: Some(vec![ItemId::Int(id)]),
        ..item("measurements")
    };
    for (k, f) in FEATURES.iter().enumerate() {
        let agg = if f.name == "urine" { Aggregate::Sum } else { Aggregate::Mean };
        let category = if f.vital { "vitals" } else { "labs" };
        let def = concept(
            ConceptClass::Numeric,
            category,
            Some(f.unit),
            agg,
            Some((f.min, f.max)),
            measured(item_id(k)),
        );
        dict.insert(def, f.name).expect("unique concept names");
    }
    let stay_value = |v: &str| SourceItem {
        val_var: Some(v.into()),
        ..item("stays")
    };
    let statics = [
        ("age", "years", (0.0, 120.0)),
        ("height", "cm", (100.0, 250.0)),
        ("weight", "kg", (20.0, 300.0)),
    ];
    for (name, unit, bounds) in statics {
        let def = concept(
            ConceptClass::Numeric,
            "demographics",
            Some(unit),
            Aggregate::First,
            Some(bounds),
            stay_value(name),
        );
        dict.insert(def, name).expect("unique concept names");
    }
    let mut sex = concept(
        ConceptClass::Categorical,
        "demographics",
        None,
        Aggregate::First,
        None,
        stay_value("sex"),
    );
    sex.levels = Some(vec!["Male".into(), "Female".into()]);
    dict.insert(sex, "sex").expect("unique concept names");

    let death = SourceItem {
        index_var: Some("outtime".into()),
        ..stay_value("died")
    };
    dict.insert(
        concept(ConceptClass::Logical, "outcome", None, Aggregate::Max, None, death),
        "death",
    )
    .expect("unique concept names");
    dict.insert(
        concept(
            ConceptClass::Numeric,
            "outcome",
            None,
            Aggregate::Max,
            Some((0.0, 24.0)),
            measured(SOFA_ITEM),
        ),
        "sofa",
    )
    .expect("unique concept names");
    for (name, tbl) in [("abx", "abx"), ("samp", "cultures")] {
        let src = SourceItem {
            callback: Some(Callback::SetValue(1.0)),
            ..item(tbl)
        };
        dict.insert(
            concept(ConceptClass::Logical, "medications", None, Aggregate::Max, None, src),
            name,
        )
        .expect("unique concept names");
    }
    dict
}

/// Per-stay plan drawn before any values are simulated.
#[derive(Debug, Clone, Default)]
struct StayPlan {
    violation: Option<Violation>,
    aki: AkiKind,
    sepsis: SepsisKind,
}

#[derive(Default)]
struct StayRows {
    measurements: Vec<(i64, i64, f64)>,
    abx: Vec<i64>,
    cultures: Vec<i64>,
}

struct SimulatedStay {
    truth: StayTruth,
    admit: i64,
    sex: &'static str,
    height: f64,
    weight: f64,
    rows: StayRows,
}

fn exact_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    fractions.iter().map(|f| (f * n as f64).round() as usize).collect()
}

fn assign_plans(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<StayPlan> {
    let n = cfg.n_stays;
    let mut plans = vec![StayPlan::default(); n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut next = 0;
    for (v, count) in cfg.violations.entries() {
        for &i in &order[next..next + count] {
            plans[i].violation = Some(v);
        }
        next += count;
    }
    let eligible: Vec<usize> = order[next..].to_vec();
    let a = &cfg.aki;
    let aki_kinds = [AkiKind::Creatinine, AkiKind::CreatinineNearMiss, AkiKind::Urine, AkiKind::UrineNearMiss];
    let aki_counts = exact_counts(eligible.len(), &[a.creatinine, a.creatinine_near_miss, a.urine, a.urine_near_miss]);
    let s = &cfg.sepsis;
    let sep_kinds = [
        SepsisKind::Positive,
        SepsisKind::SofaNearMiss,
        SepsisKind::NoCulture,
        SepsisKind::EarlyCulture,
        SepsisKind::ShortCourse,
        SepsisKind::SuspicionOnly,
    ];
    let sep_counts = exact_counts(
        eligible.len(),
        &[s.positive, s.sofa_near_miss, s.no_culture, s.early_culture, s.short_course, s.suspicion_only],
    );
    let mut pool = eligible.clone();
    pool.shuffle(rng);
    let mut it = pool.into_iter();
    for (kind, count) in aki_kinds.into_iter().zip(aki_counts) {
        for i in it.by_ref().take(count) {
            plans[i].aki = kind;
        }
    }
    let mut pool = eligible;
    pool.shuffle(rng);
    let mut it = pool.into_iter();
    for (kind, count) in sep_kinds.into_iter().zip(sep_counts) {
        for i in it.by_ref().take(count) {
            plans[i].sepsis = kind;
        }
    }
    plans
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hours of stay needed before the sepsis timeline fits, and the earliest
/// antibiotic hour.
fn sepsis_window(kind: SepsisKind) -> Option<(i64, i64)> {
    match kind {
        SepsisKind::None => None,
        // The culture sits 90 hours before the first dose.
        SepsisKind::EarlyCulture => Some((100, 100)),
        _ => Some((44, 44)),
    }
}

const ABX_TAIL_HOURS: i64 = 104;

fn simulate_stay(cfg: &SynthConfig, idx: usize, plan: &StayPlan) -> SimulatedStay {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(&[cfg.seed, 1, idx as u64]));
    let stay_id = 1 + idx as i64;
    let patient_id = 100_000 + idx as i64;
    let admit: i64 = rng.gen_range(0..500_000);

    let mut los_h = cfg.los_min_hours + {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        -cfg.los_mean_extra_hours * u.ln()
    };
    los_h = los_h.min(cfg.los_max_hours);
    if let Some((min_a, _)) = sepsis_window(plan.sepsis) {
        let need = (min_a + ABX_TAIL_HOURS + 6) as f64;
        if los_h < need {
            los_h = need + rng.gen_range(0.0..24.0);
        }
    }
    match plan.violation {
        Some(Violation::LosUnder6h) => los_h = rng.gen_range(4.5..5.9),
        Some(Violation::LosUnder30h) => los_h = rng.gen_range(8.0..29.0),
        _ => {}
    }
    let los = (los_h * 60.0).round() as i64;
    let n_bins = (los + HOUR - 1) / HOUR;

    // Latent risk factors, standardized.
    let z: [f64; 5] = std::array::from_fn(|_| std_normal(&mut rng));
    let mut age = (AGE_MEAN + AGE_SD * z[0]).clamp(18.0, 100.0);
    if plan.violation == Some(Violation::AgeUnder18) {
        age = rng.gen_range(1.0..17.5);
    }
    let age_z = (age - AGE_MEAN) / AGE_SD;
    let m = &cfg.mortality;
    let eta = m.intercept
        + m.coefficients[0] * age_z
        + m.coefficients[1..].iter().zip(&z[1..]).map(|(b, z)| b * z).sum::<f64>();
    let p = sigmoid(eta);
    let died = rng.gen::<f64>() < p;

    let sex = if rng.gen::<bool>() { "Male" } else { "Female" };
    let height = (170.0 + 10.0 * std_normal(&mut rng)).clamp(140.0, 210.0);
    let weight = (80.0 + 15.0 * std_normal(&mut rng)).clamp(40.0, 180.0);

    let mut rows = StayRows::default();
    let mut truth = StayTruth {
        stay_id,
        patient_id,
        violation: plan.violation,
        age,
        los_minutes: los,
        died,
        mortality_probability: p,
        aki: plan.aki,
        aki_onset: None,
        sepsis: plan.sepsis,
        sepsis_onset: None,
        sepsis_onset_any_course: None,
    };

    let signal: HashMap<&str, f64> = MORTALITY_FEATURES[1..]
        .iter()
        .zip(&z[1..])
        .map(|(n, z)| (*n, *z))
        .collect();
    let phi = cfg.ar_coefficient;
    let lab_phase = rng.gen_range(0..cfg.lab_interval_hours);
    for (k, f) in FEATURES.iter().enumerate() {
        if matches!(f.name, "crea" | "urine") {
            continue;
        }
        let (latent, within) = match signal.get(f.name) {
            Some(&z) => (z, m.noise),
            None => (std_normal(&mut rng), cfg.noise_scale),
        };
        let mean = f.mean + f.sd * (latent + cfg.feature_shift);
        let innov = f.sd * within * (1.0 - phi * phi).sqrt();
        let offset = rng.gen_range(0..HOUR);
        let mut dev = f.sd * within * std_normal(&mut rng);
        for h in 0..n_bins {
            dev = phi * dev + innov * std_normal(&mut rng);
            let t = h * HOUR + offset;
            let due = if f.vital { true } else { (h - lab_phase).rem_euclid(cfg.lab_interval_hours) == 0 };
            if !due || t >= los {
                continue;
            }
            let miss = if f.vital { cfg.vital_missing_rate } else { cfg.lab_missing_rate };
            // Heart rate is always charted so every hour has an observation.
            if f.name != "hr" && rng.gen::<f64>() < miss {
                continue;
            }
            rows.measurements.push((item_id(k), t, (mean + dev).clamp(f.min, f.max)));
        }
    }

    simulate_kidney(cfg, plan.aki, n_bins, los, weight, lab_phase, &mut rng, &mut rows, &mut truth);
    simulate_sepsis(plan.sepsis, n_bins, &mut rng, &mut rows, &mut truth);

    match plan.violation {
        Some(Violation::FewerThan4Bins) => rows.measurements.retain(|&(_, t, _)| t < 3 * HOUR),
        Some(Violation::GapOver12h) => {
            let len = rng.gen_range(13..=18);
            let start = rng.gen_range(6..=n_bins - len - 2);
            rows.measurements
                .retain(|&(_, t, _)| !(start * HOUR..(start + len) * HOUR).contains(&t));
        }
        _ => {}
    }
    rows.measurements.sort_by_key(|&(item, t, _)| (t, item));

    SimulatedStay {
        truth,
        admit,
        sex,
        height,
        weight,
        rows,
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_kidney(
    cfg: &SynthConfig,
    kind: AkiKind,
    n_bins: i64,
    los: i64,
    weight: f64,
    lab_phase: i64,
    rng: &mut ChaCha8Rng,
    rows: &mut StayRows,
    truth: &mut StayTruth,
) {
    let crea_item = item_id(feature_index("crea"));
    let urine_item = item_id(feature_index("urine"));
    let baseline: f64 = rng.gen_range(0.6..1.05);
    // Planted events fall between hour 8 and a few hours before discharge.
    let last = (n_bins - 12).max(9);
    let event_h = rng.gen_range(8..last);

    let crea_event = match kind {
        AkiKind::Creatinine => Some((event_h * HOUR + 40, 1.8)),
        AkiKind::CreatinineNearMiss => Some((event_h * HOUR + 40, 1.2)),
        _ => None,
    };
    let mut crea_times: Vec<i64> = (0..n_bins)
        .filter(|h| (h - lab_phase).rem_euclid(cfg.lab_interval_hours) == 0)
        .map(|h| h * HOUR + 10)
        .filter(|&t| t < los)
        .collect();
    if let Some((t, _)) = crea_event {
        crea_times.push(t);
        crea_times.sort_unstable();
    }
    for t in crea_times {
        let v = match crea_event {
            Some((te, factor)) if t >= te => baseline * factor * rng.gen_range(0.98..1.02),
            _ => baseline * rng.gen_range(0.95..1.05),
        };
        rows.measurements.push((crea_item, t, v));
    }
    if kind == AkiKind::Creatinine {
        truth.aki_onset = crea_event.map(|(t, _)| t);
    }

    // Hourly urine output, each measurement covering the preceding hour.
    let low = match kind {
        AkiKind::Urine => Some(0.4),
        AkiKind::UrineNearMiss => Some(0.6),
        _ => None,
    };
    for h in 0..n_bins {
        let t = h * HOUR + 30;
        if t >= los {
            break;
        }
        let rate = match low {
            Some(r) if (event_h..event_h + 8).contains(&h) => r,
            _ => rng.gen_range(0.8..2.0),
        };
        rows.measurements.push((urine_item, t, rate * weight));
    }
    if kind == AkiKind::Urine {
        // Six consecutive low hours end with the sixth measurement.
        truth.aki_onset = Some((event_h + 5) * HOUR + 30);
    }
}

fn simulate_sepsis(kind: SepsisKind, n_bins: i64, rng: &mut ChaCha8Rng, rows: &mut StayRows, truth: &mut StayTruth) {
    let sofa0 = rng.gen_range(0..=3) as f64;
    let Some((min_a, _)) = sepsis_window(kind) else {
        for h in 0..n_bins {
            rows.measurements.push((SOFA_ITEM, h * HOUR + 15, sofa0));
        }
        return;
    };
    let abx_h = rng.gen_range(min_a..=n_bins - ABX_TAIL_HOURS);
    let onset_h = abx_h + rng.gen_range(-36..=18);
    let jump = match kind {
        SepsisKind::SofaNearMiss => 1.0,
        SepsisKind::SuspicionOnly => 0.0,
        _ => 3.0,
    };
    for h in 0..n_bins {
        let v = if h >= onset_h { sofa0 + jump } else { sofa0 };
        rows.measurements.push((SOFA_ITEM, h * HOUR + 15, v));
    }
    let abx0 = abx_h * HOUR + 20;
    let doses = if kind == SepsisKind::ShortCourse { 2 } else { 9 };
    rows.abx.extend((0..doses).map(|d| abx0 + d * 12 * HOUR));
    match kind {
        SepsisKind::NoCulture => {}
        SepsisKind::EarlyCulture => rows.cultures.push(abx0 - 90 * HOUR),
        _ => rows.cultures.push(abx0 + 2 * HOUR),
    }
    let onset = Some(onset_h * HOUR);
    match kind {
        SepsisKind::Positive => {
            truth.sepsis_onset = onset;
            truth.sepsis_onset_any_course = onset;
        }
        SepsisKind::ShortCourse => truth.sepsis_onset_any_course = onset,
        _ => {}
    }
}

/// Draws a complete synthetic dataset. Identical configs give identical output.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(&[cfg.seed, 0]));
    let plans = assign_plans(cfg, &mut rng);
    let stays: Vec<SimulatedStay> = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| simulate_stay(cfg, i, plan))
        .collect();

    let mut t = RawTable::new("stays");
    let ints = |f: &dyn Fn(&SimulatedStay) -> Option<i64>| RawColumn::Int(stays.iter().map(f).collect());
    let floats = |f: &dyn Fn(&SimulatedStay) -> f64| RawColumn::Float(stays.iter().map(|s| Some(f(s))).collect());
    t = t
        .with_column("stay_id", ints(&|s| Some(s.truth.stay_id)))
        .with_column("patient_id", ints(&|s| Some(s.truth.patient_id)))
        .with_column("intime", ints(&|s| Some(s.admit)))
        .with_column(
            "outtime",
            ints(&|s| (s.truth.violation != Some(Violation::MissingDischarge)).then_some(s.admit + s.truth.los_minutes)),
        )
        .with_column("age", floats(&|s| s.truth.age))
        .with_column(
            "sex",
            RawColumn::Text(stays.iter().map(|s| Some(s.sex.to_string())).collect()),
        )
        .with_column("height", floats(&|s| s.height))
        .with_column("weight", floats(&|s| s.weight))
        .with_column("died", ints(&|s| Some(s.truth.died as i64)));

    let n_meas: usize = stays.iter().map(|s| s.rows.measurements.len()).sum();
    let (mut m_stay, mut m_item, mut m_time, mut m_val) = (
        Vec::with_capacity(n_meas),
        Vec::with_capacity(n_meas),
        Vec::with_capacity(n_meas),
        Vec::with_capacity(n_meas),
    );
    let (mut a_stay, mut a_time, mut c_stay, mut c_time) = (vec![], vec![], vec![], vec![]);
    for s in &stays {
        let id = s.truth.stay_id;
        for &(item, time, v) in &s.rows.measurements {
            m_stay.push(Some(id));
            m_item.push(Some(item));
            m_time.push(Some(s.admit + time));
            m_val.push(Some(v));
        }
        for &time in &s.rows.abx {
            a_stay.push(Some(id));
            a_time.push(Some(s.admit + time));
        }
        for &time in &s.rows.cultures {
            c_stay.push(Some(id));
            c_time.push(Some(s.admit + time));
        }
    }
    let n_abx = a_stay.len();
    let n_cult = c_stay.len();
    let measurements = RawTable::new("measurements")
        .with_column("stay_id", RawColumn::Int(m_stay))
        .with_column("itemid", RawColumn::Int(m_item))
        .with_column("charttime", RawColumn::Int(m_time))
        .with_column("value", RawColumn::Float(m_val));
    let abx = RawTable::new("abx")
        .with_column("stay_id", RawColumn::Int(a_stay))
        .with_column("starttime", RawColumn::Int(a_time))
        .with_column("drug", RawColumn::Text(vec![Some("vancomycin".into()); n_abx]));
    let cultures = RawTable::new("cultures")
        .with_column("stay_id", RawColumn::Int(c_stay))
        .with_column("charttime", RawColumn::Int(c_time))
        .with_column("specimen", RawColumn::Text(vec![Some("blood".into()); n_cult]));
    let tables = HashMap::from([
        ("stays".to_string(), t),
        ("measurements".to_string(), measurements),
        ("abx".to_string(), abx),
        ("cultures".to_string(), cultures),
    ]);

    let truths: Vec<StayTruth> = stays.into_iter().map(|s| s.truth).collect();
    let mut violation_counts = BTreeMap::new();
    for t in &truths {
        if let Some(v) = t.violation {
            *violation_counts.entry(v).or_insert(0) += 1;
        }
    }
    let clean: Vec<f64> = truths
        .iter()
        .filter(|t| t.violation.is_none())
        .map(|t| t.mortality_probability)
        .collect();
    let truth = GroundTruth {
        dataset: DATASET_NAME.into(),
        config: cfg.clone(),
        bayes_ceiling_auroc: bayes_ceiling_auroc(&clean),
        stays: truths,
        violation_counts,
    };
    Ok(SynthOutput {
        dataset: Dataset::new(source_config(), tables),
        dictionary: concept_dictionary(),
        truth,
    })
}
