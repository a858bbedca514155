//! Records → normalized 102-dimensional states, encoded actions and rewards.
//!
//! Per patient, every time-varying variable is linearly interpolated between
//! observations and filled flat beyond the first/last one. The 39 trend
//! variables then gain a rate-of-change feature. All features are z-scored
//! with statistics from training patients only.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{discretize_dose, nearest_observed, QuantileThresholds};
use crate::data_model::{
    feature_names, manifest_path, read_json, write_json, DatasetManifest, Labs, Others,
    PatientRecord, SplitCounts, Transition, Vitals, MANIFEST_VERSION, N_BASE_FEATURES, STATE_DIM,
    WINDOW_HOURS,
};
use crate::error::{Error, Result};
use crate::reward::{total_reward, RewardConfig, RewardVitals};

pub const TEST_FRACTION: f64 = 0.2;

/// Mean change per 4-hour step over the last (up to) three steps.
///
/// Fewer than two values yields 0.
pub fn rate_of_change(series: &[f64]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let last = series.len() - 1;
    let k = last.min(3);
    (series[last] - series[last - k]) / k as f64
}

/// Linear interpolation between observations, nearest-value fill at the
/// edges. `None` if nothing was observed.
pub fn impute(series: &[Option<f64>]) -> Option<Vec<f64>> {
    let observed: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    let (&first, &last) = (observed.first()?, observed.last()?);
    let mut out = vec![0.0; series.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = if i <= first {
            series[first].unwrap()
        } else if i >= last {
            series[last].unwrap()
        } else if let Some(v) = series[i] {
            v
        } else {
            let lo = observed[observed.partition_point(|&j| j < i) - 1];
            let hi = observed[observed.partition_point(|&j| j < i)];
            let (a, b) = (series[lo].unwrap(), series[hi].unwrap());
            a + (b - a) * (i - lo) as f64 / (hi - lo) as f64
        };
    }
    Some(out)
}

/// Per-window values the guideline policy needs beyond the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    /// 1-based ICU day.
    pub icu_day: u32,
    /// 1-based day since enteral feeding started.
    pub feeding_day: u32,
    pub crrt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    pub female: bool,
    pub height_cm: f64,
    pub weight_kg: f64,
    pub burns: bool,
}

/// One patient's featurized trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub patient_id: String,
    pub test: bool,
    pub mortality: bool,
    pub meta: PatientMeta,
    /// Normalized state per window.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Imputed raw reward variables per window.
    pub vitals: Vec<RewardVitals>,
    pub contexts: Vec<DecisionContext>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn transition(&self, t: usize) -> Transition {
        let terminal = t + 1 == self.len();
        Transition {
            state: self.states[t].clone(),
            action: self.actions[t],
            reward: self.rewards[t],
            next_state: (!terminal).then(|| self.states[t + 1].clone()),
            terminal,
            mortality: self.mortality,
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len()).map(|t| self.transition(t))
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }
}

/// Unnormalized per-window features plus everything derived alongside them.
struct RawPatient {
    features: Vec<[f64; STATE_DIM]>,
    vitals: Vec<RewardVitals>,
    actions: Vec<usize>,
    contexts: Vec<DecisionContext>,
}

/// Mean of observed values per base feature across `records`; fills
/// variables a patient never had measured.
fn observed_means(records: &[&PatientRecord]) -> Vec<f64> {
    let mut sum = vec![0.0; N_BASE_FEATURES];
    let mut n = vec![0usize; N_BASE_FEATURES];
    for r in records {
        for w in &r.windows {
            for (j, v) in window_series_values(r, w).into_iter().enumerate() {
                if let Some(v) = v {
                    sum[j] += v;
                    n[j] += 1;
                }
            }
        }
    }
    sum.iter().zip(&n).map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 }).collect()
}

/// The 63 base variables of one window in canonical order, `None` where unmeasured.
fn window_series_values(r: &PatientRecord, w: &crate::data_model::TimeWindow) -> Vec<Option<f64>> {
    let c = &r.comorbidities;
    let mut v: Vec<Option<f64>> = vec![
        Some(r.age),
        Some(r.gender as f64),
        w.weight_kg,
        Some(r.icu_readmission as f64),
        Some(c.burns as f64),
        Some(c.ckd as f64),
        Some(c.diabetes as f64),
        Some(c.sepsis as f64),
        Some(c.trauma as f64),
        Some(c.elixhauser_score as f64),
    ];
    v.extend(w.vitals.values());
    v.extend(w.labs.values());
    v.extend(w.feeding.values());
    v.extend(w.treatments.values());
    v.extend(w.others.values());
    debug_assert_eq!(v.len(), N_BASE_FEATURES);
    v
}

const WEIGHT: usize = 2;

fn base_index(block_offset: usize, names: &[&str], name: &str) -> usize {
    block_offset + names.iter().position(|n| *n == name).unwrap()
}

const VITALS_OFFSET: usize = 10;
const LABS_OFFSET: usize = VITALS_OFFSET + 13;
const FEEDING_OFFSET: usize = LABS_OFFSET + 24;
const TREATMENTS_OFFSET: usize = FEEDING_OFFSET + 5;
const OTHERS_OFFSET: usize = TREATMENTS_OFFSET + 8;

/// Base-feature indices of the 39 trend variables, in `roc_*` order.
fn roc_sources() -> Vec<usize> {
    let mut v = vec![WEIGHT];
    v.extend(VITALS_OFFSET..VITALS_OFFSET + 13);
    v.extend(LABS_OFFSET..LABS_OFFSET + 24);
    v.push(base_index(OTHERS_OFFSET, Others::NAMES, "urine_output_4h"));
    v
}

fn raw_patient(
    r: &PatientRecord,
    thresholds: &QuantileThresholds,
    fallback: &[f64],
) -> Result<RawPatient> {
    let n = r.windows.len();
    let columns: Vec<Vec<Option<f64>>> = {
        let rows: Vec<Vec<Option<f64>>> =
            r.windows.iter().map(|w| window_series_values(r, w)).collect();
        (0..N_BASE_FEATURES).map(|j| rows.iter().map(|row| row[j]).collect()).collect()
    };
    let mut imputed: Vec<Vec<f64>> = Vec::with_capacity(N_BASE_FEATURES);
    for (j, col) in columns.iter().enumerate() {
        let fill = if j == WEIGHT { r.weight_kg } else { fallback[j] };
        imputed.push(impute(col).unwrap_or_else(|| vec![fill; n]));
    }

    let roc = roc_sources();
    let mut features = Vec::with_capacity(n);
    for t in 0..n {
        let mut f = [0.0; STATE_DIM];
        for j in 0..N_BASE_FEATURES {
            f[j] = imputed[j][t];
        }
        let from = t.saturating_sub(3);
        for (k, &j) in roc.iter().enumerate() {
            f[N_BASE_FEATURES + k] = rate_of_change(&imputed[j][from..=t]);
        }
        features.push(f);
    }

    let col = |offset: usize, names: &[&str], name: &str| &imputed[base_index(offset, names, name)];
    let sofa = col(VITALS_OFFSET, Vitals::NAMES, "sofa");
    let lactate = col(LABS_OFFSET, Labs::NAMES, "lactate");
    let glucose = col(LABS_OFFSET, Labs::NAMES, "glucose");
    let phosphate = col(LABS_OFFSET, Labs::NAMES, "phosphate");
    let crrt = &imputed[TREATMENTS_OFFSET + 2];
    let hours_en = col(OTHERS_OFFSET, Others::NAMES, "hours_since_en_start");

    let mut vitals = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut contexts = Vec::with_capacity(n);
    for (t, w) in r.windows.iter().enumerate() {
        vitals.push(RewardVitals {
            sofa: sofa[t],
            lactate: lactate[t],
            glucose: glucose[t],
            phosphate: phosphate[t],
        });
        let d = &w.dose_administered;
        let code = discretize_dose(d.calories, d.protein, d.water, thresholds)?;
        if !code.is_observed() {
            log::warn!(
                "{} window {}: unobserved action triple {:?} mapped to nearest observed action",
                r.patient_id,
                w.t_index,
                code
            );
        }
        actions.push(nearest_observed(code));
        contexts.push(DecisionContext {
            icu_day: (w.t_index as f64 * WINDOW_HOURS / 24.0).floor() as u32 + 1,
            feeding_day: (hours_en[t].max(0.0) / 24.0).floor() as u32 + 1,
            crrt: crrt[t] >= 0.5,
        });
    }
    Ok(RawPatient { features, vitals, actions, contexts })
}

/// Deterministic 80/20 split by patient. Returns the test patient ids.
pub fn split_patients(ids: &[&str], seed: u64) -> Vec<String> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (ids.len() as f64 * TEST_FRACTION).round() as usize;
    let mut test: Vec<usize> = order[..n_test].to_vec();
    test.sort_unstable();
    test.into_iter().map(|i| ids[i].to_string()).collect()
}

/// Split the cohort and compute normalization statistics on its training part.
pub fn build_manifest(
    records: &[PatientRecord],
    thresholds: &QuantileThresholds,
    split_seed: u64,
    config_hash: &str,
) -> Result<DatasetManifest> {
    thresholds.validate()?;
    let ids: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    let test_ids = split_patients(&ids, split_seed);
    let test_set: HashSet<&str> = test_ids.iter().map(String::as_str).collect();
    let in_test = |id: &str| test_set.contains(id);

    let usable_records: Vec<&PatientRecord> =
        records.iter().filter(|r| r.windows.len() >= 2).collect();
    let train: Vec<&PatientRecord> =
        usable_records.iter().copied().filter(|r| !in_test(&r.patient_id)).collect();
    let fallback = observed_means(&train);

    let mut sum = vec![0.0; STATE_DIM];
    let mut sumsq = vec![0.0; STATE_DIM];
    let mut n = 0usize;
    for r in &train {
        for f in raw_patient(r, thresholds, &fallback)?.features {
            for j in 0..STATE_DIM {
                sum[j] += f[j];
            }
            n += 1;
        }
    }
    let means: Vec<f64> = sum.iter().map(|s| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    for r in &train {
        for f in raw_patient(r, thresholds, &fallback)?.features {
            for j in 0..STATE_DIM {
                sumsq[j] += (f[j] - means[j]).powi(2);
            }
        }
    }
    let stds: Vec<f64> = sumsq
        .iter()
        .map(|s| {
            let sd = if n > 0 { (s / n as f64).sqrt() } else { 0.0 };
            // zero-variance features are left unscaled
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();

    let mut counts = SplitCounts::default();
    for r in &usable_records {
        if in_test(&r.patient_id) {
            counts.test_patients += 1;
            counts.test_transitions += r.windows.len();
        } else {
            counts.train_patients += 1;
            counts.train_transitions += r.windows.len();
        }
    }
    Ok(DatasetManifest {
        format_version: MANIFEST_VERSION,
        config_hash: config_hash.to_string(),
        feature_names: feature_names(),
        feature_means: means,
        feature_stds: stds,
        action_thresholds: thresholds.clone(),
        split_seed,
        test_patient_ids: test_ids,
        counts,
    })
}

/// Featurize every usable record against a finished manifest.
pub fn build_transitions(
    records: &[PatientRecord],
    manifest: &DatasetManifest,
    reward_cfg: &RewardConfig,
) -> Result<Vec<Episode>> {
    manifest.check_schema()?;
    let test_set: HashSet<&str> = manifest.test_patient_ids.iter().map(String::as_str).collect();
    let usable: Vec<&PatientRecord> = records
        .iter()
        .filter(|r| {
            if r.windows.len() < 2 {
                log::warn!(
                    "excluding {}: {} window(s), need at least 2",
                    r.patient_id,
                    r.windows.len()
                );
            }
            r.windows.len() >= 2
        })
        .collect();
    let train: Vec<&PatientRecord> = usable
        .iter()
        .copied()
        .filter(|r| !test_set.contains(r.patient_id.as_str()))
        .collect();
    let fallback = observed_means(&train);
    let mut episodes = Vec::with_capacity(usable.len());
    for r in usable {
        let raw = raw_patient(r, &manifest.action_thresholds, &fallback)?;
        let n = raw.features.len();
        let states: Vec<Vec<f64>> = raw
            .features
            .iter()
            .map(|f| {
                (0..STATE_DIM)
                    .map(|j| (f[j] - manifest.feature_means[j]) / manifest.feature_stds[j])
                    .collect()
            })
            .collect();
        let died = r.mortality == 1;
        let rewards = (0..n)
            .map(|t| {
                let terminal = t + 1 == n;
                let next = (!terminal).then(|| &raw.vitals[t + 1]);
                total_reward(&raw.vitals[t], next, terminal, died, reward_cfg)
            })
            .collect();
        episodes.push(Episode {
            patient_id: r.patient_id.clone(),
            test: test_set.contains(r.patient_id.as_str()),
            mortality: died,
            meta: PatientMeta {
                female: r.gender == 1,
                height_cm: r.height_cm,
                weight_kg: r.weight_kg,
                burns: r.comorbidities.burns == 1,
            },
            states,
            actions: raw.actions,
            rewards,
            vitals: raw.vitals,
            contexts: raw.contexts,
        });
    }
    Ok(episodes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeFileHeader {
    format: String,
    version: u32,
    config_hash: String,
    episodes: usize,
}

const EPISODE_FORMAT: &str = "enteral-rl/episodes";

/// Write episodes one per line after a header line; the manifest goes alongside.
pub fn write_episodes(path: &Path, episodes: &[Episode], manifest: &DatasetManifest) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = EpisodeFileHeader {
        format: EPISODE_FORMAT.into(),
        version: 1,
        config_hash: manifest.config_hash.clone(),
        episodes: episodes.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    write_json(&manifest_path(path), manifest)
}

pub fn read_episodes(path: &Path) -> Result<(Vec<Episode>, DatasetManifest)> {
    let manifest: DatasetManifest = read_json(&manifest_path(path))?;
    manifest.check_schema()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let malformed = |line: usize, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header_line = lines
        .next()
        .ok_or_else(|| malformed(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: EpisodeFileHeader =
        serde_json::from_str(&header_line).map_err(|e| malformed(1, e.to_string()))?;
    if header.format != EPISODE_FORMAT || header.version != 1 {
        return Err(Error::Schema(format!(
            "unsupported episode file {} v{}",
            header.format, header.version
        )));
    }
    let mut episodes = Vec::with_capacity(header.episodes);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let ep: Episode = serde_json::from_str(&line).map_err(|e| malformed(i + 2, e.to_string()))?;
        if ep.states.iter().any(|s| s.len() != STATE_DIM) {
            return Err(malformed(i + 2, "state vector length must be 102".into()));
        }
        episodes.push(ep);
    }
    if episodes.len() != header.episodes {
        return Err(Error::Schema(format!(
            "header announces {} episodes, found {}",
            header.episodes,
            episodes.len()
        )));
    }
    Ok((episodes, manifest))
}
