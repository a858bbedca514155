//! Patient records, the transition unit, and the on-disk dataset format.
//!
//! A dataset is a UTF-8 file with one JSON patient record per line, plus a
//! sibling `<stem>.manifest.json` carrying feature order, normalization
//! statistics, action thresholds and the train/test split.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::action::QuantileThresholds;
use crate::error::{Error, Result};

/// Windows are 4 hours long and only the first 10 ICU days are kept.
pub const WINDOW_HOURS: f64 = 4.0;
pub const MAX_WINDOWS: u32 = 60;

pub const N_BASE_FEATURES: usize = 63;
pub const N_ROC_FEATURES: usize = 39;
pub const STATE_DIM: usize = N_BASE_FEATURES + N_ROC_FEATURES;

pub const MANIFEST_VERSION: u32 = 1;

macro_rules! measurement_block {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(pub $field: Option<f64>,)+
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn values(&self) -> Vec<Option<f64>> {
                vec![$(self.$field),+]
            }

            pub fn from_values(values: &[Option<f64>]) -> Self {
                assert_eq!(values.len(), Self::NAMES.len());
                let mut it = values.iter().copied();
                Self { $($field: it.next().unwrap(),)+ }
            }
        }
    };
}

measurement_block!(
    /// Bedside vitals and severity scores.
    Vitals {
        hr, sbp, mbp, dbp, resp_rate, temperature, paco2, pao2, pf_ratio, spo2, sofa, gcs,
        shock_index,
    }
);

measurement_block!(Labs {
    albumin,
    ph,
    calcium,
    glucose,
    hemoglobin,
    magnesium,
    wbc,
    creatinine,
    bicarbonate,
    sodium,
    lactate,
    chloride,
    platelets,
    potassium,
    ptt,
    pt,
    ast,
    alt,
    bun,
    inr,
    ionised_calcium,
    total_bilirubin,
    base_excess,
    phosphate,
});

measurement_block!(
    /// Per-kg doses delivered in the preceding window and running totals.
    Feeding {
        prev_calories,
        prev_protein,
        prev_water,
        cum_calories,
        cum_protein,
    }
);

measurement_block!(Treatments {
    mechanical_ventilation,
    fio2,
    crrt,
    iv_fluids,
    vasopressor_dose,
    propofol_dose,
    insulin_dose,
    insulin_24h,
});

measurement_block!(Others {
    urine_output_4h,
    total_output,
    hours_since_en_start,
});

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dose {
    /// kcal/kg over the window
    pub calories: f64,
    /// g/kg over the window
    pub protein: f64,
    /// ml/kg over the window
    pub water: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    /// 4-hour steps since ICU admission.
    pub t_index: u32,
    /// Weight measured during this window, if any.
    pub weight_kg: Option<f64>,
    pub vitals: Vitals,
    pub labs: Labs,
    pub feeding: Feeding,
    pub treatments: Treatments,
    pub others: Others,
    pub dose_administered: Dose,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comorbidities {
    pub burns: u8,
    pub ckd: u8,
    pub diabetes: u8,
    pub sepsis: u8,
    pub trauma: u8,
    pub elixhauser_score: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: f64,
    /// 1 = female, 0 = male
    pub gender: u8,
    pub weight_kg: f64,
    /// Metadata only: used for BMI by the guideline policy, not a state feature.
    pub height_cm: f64,
    pub icu_readmission: u8,
    pub comorbidities: Comorbidities,
    pub icu_stay_hours: f64,
    /// ICU death, attached to the final window.
    pub mortality: u8,
    pub windows: Vec<TimeWindow>,
}

impl PatientRecord {
    pub fn bmi(&self) -> f64 {
        let h = self.height_cm / 100.0;
        self.weight_kg / (h * h)
    }
}

/// One step of RL experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Option<Vec<f64>>,
    pub terminal: bool,
    pub mortality: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train_patients: usize,
    pub test_patients: usize,
    pub train_transitions: usize,
    pub test_transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub feature_names: Vec<String>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub action_thresholds: QuantileThresholds,
    pub split_seed: u64,
    /// Patients held out for testing; all others are training patients.
    pub test_patient_ids: Vec<String>,
    pub counts: SplitCounts,
}

impl DatasetManifest {
    pub fn check_schema(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Schema(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        let names = feature_names();
        if self.feature_names.len() != names.len() {
            return Err(Error::Schema(format!(
                "manifest lists {} features, expected {}",
                self.feature_names.len(),
                names.len()
            )));
        }
        if let Some(i) = (0..names.len()).find(|&i| self.feature_names[i] != names[i]) {
            return Err(Error::Schema(format!(
                "feature {i} is `{}`, expected `{}`",
                self.feature_names[i], names[i]
            )));
        }
        if self.feature_means.len() != STATE_DIM || self.feature_stds.len() != STATE_DIM {
            return Err(Error::Schema("normalization statistics must have 102 entries".into()));
        }
        if let Some(i) = self.feature_stds.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::Schema(format!("feature_stds[{i}] must be > 0")));
        }
        self.action_thresholds
            .validate()
            .map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn is_test(&self, patient_id: &str) -> bool {
        self.test_patient_ids.iter().any(|p| p == patient_id)
    }
}

pub const DEMOGRAPHIC_NAMES: [&str; 4] = ["age", "gender", "weight", "icu_readmission"];
pub const COMORBIDITY_NAMES: [&str; 6] =
    ["burns", "ckd", "diabetes", "sepsis", "trauma", "elixhauser_score"];

/// Names of the 39 base variables that also get a rate-of-change feature.
pub fn roc_base_names() -> Vec<&'static str> {
    let mut v = vec!["weight"];
    v.extend_from_slice(Vitals::NAMES);
    v.extend_from_slice(Labs::NAMES);
    v.push("urine_output_4h");
    v
}

/// Canonical 102-entry feature order: 63 base variables then 39 `roc_*`.
pub fn feature_names() -> Vec<String> {
    let mut v: Vec<String> = Vec::with_capacity(STATE_DIM);
    for block in [
        &DEMOGRAPHIC_NAMES[..],
        &COMORBIDITY_NAMES[..],
        Vitals::NAMES,
        Labs::NAMES,
        Feeding::NAMES,
        Treatments::NAMES,
        Others::NAMES,
    ] {
        v.extend(block.iter().map(|s| s.to_string()));
    }
    v.extend(roc_base_names().into_iter().map(|n| format!("roc_{n}")));
    v
}

pub fn feature_index(name: &str) -> Option<usize> {
    feature_names().iter().position(|n| n == name)
}

/// Check every type invariant; an empty list means the record is valid.
pub fn validate_record(record: &PatientRecord) -> Vec<String> {
    let mut out = Vec::new();
    let binary = |field: &str, v: f64| {
        if v != 0.0 && v != 1.0 {
            Some(format!("{field} must be binary (0 or 1), got {v}"))
        } else {
            None
        }
    };
    let c = &record.comorbidities;
    for (name, v) in [
        ("gender", record.gender),
        ("icu_readmission", record.icu_readmission),
        ("burns", c.burns),
        ("ckd", c.ckd),
        ("diabetes", c.diabetes),
        ("sepsis", c.sepsis),
        ("trauma", c.trauma),
        ("mortality", record.mortality),
    ] {
        out.extend(binary(name, v as f64));
    }
    if !(record.weight_kg > 0.0) || !record.weight_kg.is_finite() {
        out.push(format!("weight_kg must be > 0, got {}", record.weight_kg));
    }
    if !(record.height_cm > 0.0) || !record.height_cm.is_finite() {
        out.push(format!("height_cm must be > 0, got {}", record.height_cm));
    }
    if !(record.age >= 0.0) || !record.age.is_finite() {
        out.push(format!("age must be finite and >= 0, got {}", record.age));
    }
    if record.windows.is_empty() {
        out.push("windows must be nonempty".into());
        return out;
    }

    for (k, w) in record.windows.iter().enumerate() {
        let at = format!("window {k} (t_index {})", w.t_index);
        if k > 0 && w.t_index != record.windows[k - 1].t_index + 1 {
            out.push(format!("{at}: timestamps must increase in steps of 4 hours"));
        }
        if w.t_index >= MAX_WINDOWS {
            out.push(format!("{at}: lies beyond the first 10 days post-admission"));
        }
        let d = &w.dose_administered;
        if !(d.calories > 0.0 && d.protein > 0.0 && d.water > 0.0)
            || ![d.calories, d.protein, d.water].iter().all(|x| x.is_finite())
        {
            out.push(format!("{at}: dose components must be > 0"));
        }
        if let Some(wt) = w.weight_kg {
            if !(wt > 0.0) {
                out.push(format!("{at}: weight_kg must be > 0"));
            }
        }
        let blocks: [(&[&str], Vec<Option<f64>>); 5] = [
            (Vitals::NAMES, w.vitals.values()),
            (Labs::NAMES, w.labs.values()),
            (Feeding::NAMES, w.feeding.values()),
            (Treatments::NAMES, w.treatments.values()),
            (Others::NAMES, w.others.values()),
        ];
        for (names, values) in blocks.iter() {
            for (name, v) in names.iter().zip(values) {
                if let Some(v) = v {
                    if !v.is_finite() {
                        out.push(format!("{at}: {name} must be finite"));
                    }
                }
            }
        }
        if let Some(s) = w.vitals.sofa {
            if !(0.0..=24.0).contains(&s) {
                out.push(format!("{at}: sofa must lie in [0, 24], got {s}"));
            }
        }
        if let Some(g) = w.vitals.gcs {
            if !(3.0..=15.0).contains(&g) {
                out.push(format!("{at}: gcs must lie in [3, 15], got {g}"));
            }
        }
        for (name, v) in [
            ("mechanical_ventilation", w.treatments.mechanical_ventilation),
            ("crrt", w.treatments.crrt),
        ] {
            if let Some(v) = v {
                out.extend(binary(&format!("{at}: {name}"), v));
            }
        }
    }

    // The reward needs these at every step; imputation can only fill them if
    // they are observed at least once.
    let required: [(&str, fn(&TimeWindow) -> Option<f64>); 4] = [
        ("sofa", |w| w.vitals.sofa),
        ("lactate", |w| w.labs.lactate),
        ("glucose", |w| w.labs.glucose),
        ("phosphate", |w| w.labs.phosphate),
    ];
    for (name, get) in required {
        if record.windows.iter().all(|w| get(w).is_none()) {
            out.push(format!("{name} must be observed in at least one window"));
        }
    }
    out
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let stem = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    dataset.with_file_name(format!("{stem}.manifest.json"))
}

pub fn write_dataset(path: &Path, records: &[PatientRecord], manifest: &DatasetManifest) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    write_json(&manifest_path(path), manifest)
}

pub fn read_dataset(path: &Path) -> Result<(Vec<PatientRecord>, DatasetManifest)> {
    let manifest: DatasetManifest = read_json(&manifest_path(path))?;
    manifest.check_schema()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let violations = validate_record(&record);
        if !violations.is_empty() {
            return Err(Error::InvalidRecord {
                patient_id: record.patient_id,
                violations,
            });
        }
        records.push(record);
    }
    Ok((records, manifest))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}
