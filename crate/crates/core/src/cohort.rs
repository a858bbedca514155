//! Synthetic ICU enteral-feeding cohorts.
//!
//! A small parametric simulator. Each patient has a latent severity that
//! mean-reverts to a baseline; SOFA is its rounded reading and lactate tracks
//! it. Every window has an "ideal" feeding level per component that depends
//! on observable context (feeding day, body weight, diabetes, CRRT, urine output).
//! Glucose rises with calories above the ideal and falls below it, phosphate
//! does the same with protein, and any mismatch (water included) pushes
//! severity and lactate up. Mortality is logistic in terminal severity, age and
//! mean biomarker deviation, with the intercept solved so the cohort hits the
//! target rate. `effect_strength` scales every dosing effect; at zero the
//! outcome no longer depends on what was given.
//!
//! The simulated clinician follows the ideal with a per-patient adherence
//! probability and otherwise draws from the configured action-frequency
//! table, often repeating its previous off-protocol choice.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::action::{
    ActionCode, Component, QuantileThresholds, ACTION_LEVELS, N_ACTIONS, REFERENCE_ACTION_COUNTS,
};
use crate::data_model::{
    Comorbidities, Dose, Feeding, Labs, Others, PatientRecord, TimeWindow, Treatments, Vitals,
    MAX_WINDOWS, WINDOW_HOURS,
};
use crate::error::{Error, Result};
use crate::reward::{deviation, RewardConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    pub mortality_rate_target: f64,
    pub mean_stay_hours: f64,
    pub female_fraction: f64,
    pub mean_age: f64,
    /// Weight per action id for off-protocol clinician choices.
    pub action_frequency_table: Vec<f64>,
    /// Scales every dosing effect on physiology and mortality; 0 disables them.
    pub effect_strength: f64,
    /// Mean of the per-patient probability of giving the ideal action.
    pub mean_adherence: f64,
    /// Probability that a non-reward lab is missing in a window.
    pub missing_rate: f64,
    pub thresholds: QuantileThresholds,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 5000,
            seed: 0,
            mortality_rate_target: 0.2246,
            mean_stay_hours: 241.0,
            female_fraction: 0.4163,
            mean_age: 64.92,
            action_frequency_table: REFERENCE_ACTION_COUNTS.iter().map(|&c| c as f64).collect(),
            effect_strength: 1.0,
            mean_adherence: 0.4,
            missing_rate: 0.1,
            thresholds: QuantileThresholds::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("mortality_rate_target", self.mortality_rate_target),
            ("female_fraction", self.female_fraction),
            ("missing_rate", self.missing_rate),
        ];
        for (name, p) in fractions {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synth.{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.mean_adherence > 0.0 && self.mean_adherence < 1.0) {
            return Err(Error::Config(format!(
                "synth.mean_adherence must be in (0, 1), got {}",
                self.mean_adherence
            )));
        }
        if !(self.mean_stay_hours > 0.0) || !self.mean_stay_hours.is_finite() {
            return Err(Error::Config("synth.mean_stay_hours must be > 0".into()));
        }
        if !(18.0..=100.0).contains(&self.mean_age) {
            return Err(Error::Config(format!("synth.mean_age {} is not an adult age", self.mean_age)));
        }
        if !(self.effect_strength >= 0.0) || !self.effect_strength.is_finite() {
            return Err(Error::Config("synth.effect_strength must be >= 0".into()));
        }
        if self.action_frequency_table.len() != N_ACTIONS {
            return Err(Error::Config(format!(
                "synth.action_frequency_table needs {N_ACTIONS} weights, got {}",
                self.action_frequency_table.len()
            )));
        }
        let weights_ok = self.action_frequency_table.iter().all(|w| *w >= 0.0 && w.is_finite());
        if !weights_ok || self.action_frequency_table.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "synth.action_frequency_table weights must be >= 0 with a positive sum".into(),
            ));
        }
        self.thresholds.validate()
    }
}

// Population parameters of the simulator.
const GLUCOSE_PER_LEVEL: f64 = 18.0;
const PHOSPHATE_PER_LEVEL: f64 = 0.7;
const SEVERITY_HARM: f64 = 0.06;
const LACTATE_HARM: f64 = 0.3;
const MORTALITY_SEVERITY: f64 = 0.35;
const MORTALITY_AGE: f64 = 0.03;
const MORTALITY_DEVIATION: f64 = 1.5;
const STICKINESS: f64 = 0.6;
/// Urine output (ml per 4 h) cut-points for the ideal water level.
const URINE_CUTS: [f64; 3] = [150.0, 250.0, 400.0];
/// Admission weight (kg) from which the ideal calorie level drops by one.
const HEAVY_KG: f64 = 90.0;

/// Ideal level triple for a window. Shared with tests and analysis code that
/// want to know what the simulator rewards.
pub fn ideal_action(feeding_day: u32, weight_kg: f64, diabetes: bool, crrt: bool, urine_ml: f64) -> ActionCode {
    let mut cal = feeding_day.clamp(1, 4) as i32;
    if weight_kg >= HEAVY_KG {
        cal -= 1;
    }
    if diabetes {
        cal -= 1;
    }
    let cal = cal.clamp(1, 4) as u8;
    let pro = (cal + crrt as u8).min(4);
    let water = 1 + URINE_CUTS.iter().filter(|&&c| urine_ml > c).count() as u8;
    ActionCode { cal, pro, water }
}

/// Per-patient draws that do not depend on the mortality intercept.
struct Simulated {
    record: PatientRecord,
    linear_predictor: f64,
    mortality_draw: f64,
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<Vec<PatientRecord>> {
    cfg.validate()?;
    let table = WeightedIndex::new(&cfg.action_frequency_table)
        .map_err(|e| Error::Config(format!("synth.action_frequency_table: {e}")))?;
    let sims: Vec<Simulated> =
        (0..cfg.n_patients).map(|i| simulate_patient(cfg, &table, i)).collect();
    if sims.is_empty() {
        return Ok(Vec::new());
    }
    let etas: Vec<f64> = sims.iter().map(|s| s.linear_predictor).collect();
    let b0 = solve_intercept(&etas, cfg.mortality_rate_target);
    Ok(sims
        .into_iter()
        .map(|s| {
            let mut r = s.record;
            r.mortality = (s.mortality_draw < logistic(b0 + s.linear_predictor)) as u8;
            r
        })
        .collect())
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Intercept `b` with `mean(logistic(b + eta)) = target`, by bisection.
fn solve_intercept(etas: &[f64], target: f64) -> f64 {
    let mean_p = |b: f64| etas.iter().map(|e| logistic(b + e)).sum::<f64>() / etas.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).unwrap().sample(rng)
}

fn bern(rng: &mut ChaCha8Rng, p: f64) -> u8 {
    rng.gen_bool(p.clamp(0.0, 1.0)) as u8
}

/// Dose inside the interval of `level`, strictly above the lower cut-point.
fn dose_in_level(rng: &mut ChaCha8Rng, cuts: &[f64; 3], level: u8) -> f64 {
    let (lo, hi) = match level {
        1 => (0.3 * cuts[0], cuts[0]),
        4 => (cuts[2], 1.4 * cuts[2]),
        l => (cuts[l as usize - 2], cuts[l as usize - 1]),
    };
    let u: f64 = 1.0 - rng.gen::<f64>();
    lo + u * (hi - lo)
}

fn simulate_patient(cfg: &SynthConfig, table: &WeightedIndex<f64>, index: usize) -> Simulated {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let e = cfg.effect_strength;
    let reward_ranges = RewardConfig::default();

    let age = normal(&mut rng, cfg.mean_age, 15.0).clamp(18.0, 95.0);
    let gender = bern(&mut rng, cfg.female_fraction);
    let height_cm = if gender == 1 { normal(&mut rng, 162.0, 7.0) } else { normal(&mut rng, 176.0, 7.5) }
        .clamp(140.0, 205.0);
    let bmi = LogNormal::new(28f64.ln(), 0.22).unwrap().sample(&mut rng).clamp(15.0, 60.0);
    let weight_kg = bmi * (height_cm / 100.0).powi(2);
    let icu_readmission = bern(&mut rng, 0.1);
    let ckd = bern(&mut rng, 0.15);
    let diabetes = bern(&mut rng, 0.3);
    let sepsis = bern(&mut rng, 0.35);
    let comorbidities = Comorbidities {
        burns: bern(&mut rng, 0.02),
        ckd,
        diabetes,
        sepsis,
        trauma: bern(&mut rng, 0.1),
        elixhauser_score: (normal(&mut rng, 5.0 + 3.0 * (ckd + diabetes) as f64, 5.0)).round() as i32,
    };
    let crrt = rng.gen_bool(0.06 + 0.25 * ckd as f64);
    let mech_vent = bern(&mut rng, 0.6);

    let stay = Gamma::new(2.0, cfg.mean_stay_hours / 2.0).unwrap().sample(&mut rng);
    let en_start = rng.gen_range(0..=12u32);
    let by_stay = (stay / WINDOW_HOURS).floor() as u32;
    let n_windows = by_stay.saturating_sub(en_start).clamp(3, MAX_WINDOWS - en_start);
    let icu_stay_hours = stay.max(((en_start + n_windows) as f64) * WINDOW_HOURS);

    let adherence = {
        let k = 2.0;
        Beta::new(k * cfg.mean_adherence, k * (1.0 - cfg.mean_adherence)).unwrap().sample(&mut rng)
    };

    // latent state
    let sev0 = (normal(&mut rng, 6.0, 2.5) + 1.5 * sepsis as f64).clamp(0.0, 20.0);
    let mut sev = sev0;
    let mut lactate = (0.8 + 0.12 * sev + normal(&mut rng, 0.0, 0.3)).max(0.4);
    let glucose_base = 155.0 + 20.0 * diabetes as f64;
    let mut glucose = glucose_base + normal(&mut rng, 0.0, 20.0);
    let phosphate_base = 3.5 + 0.6 * ckd as f64;
    let mut phosphate = phosphate_base + normal(&mut rng, 0.0, 0.4);
    let urine_base = LogNormal::new(240f64.ln() - 0.4 * ckd as f64, 0.45).unwrap().sample(&mut rng);
    let mut log_urine = urine_base.ln();
    let mut weight = weight_kg;

    let mut windows = Vec::with_capacity(n_windows as usize);
    let mut prev_dose: Option<Dose> = None;
    let (mut cum_cal, mut cum_pro) = (0.0, 0.0);
    let mut off_protocol: Option<usize> = None;
    let mut insulin_24h = std::collections::VecDeque::from(vec![0.0; 6]);
    let mut deviation_sum = 0.0;

    for k in 0..n_windows {
        let t_index = en_start + k;
        let hours_en = k as f64 * WINDOW_HOURS;
        let feeding_day = (hours_en / 24.0).floor() as u32 + 1;
        let urine_ml = log_urine.exp();
        let ideal = ideal_action(feeding_day, weight_kg, diabetes == 1, crrt, urine_ml);

        let action = if rng.gen_bool(adherence) {
            ideal.id().expect("ideal actions are observed triples")
        } else {
            let a = match off_protocol {
                Some(a) if rng.gen_bool(STICKINESS) => a,
                _ => table.sample(&mut rng),
            };
            off_protocol = Some(a);
            a
        };
        let (cal, pro, water) = ACTION_LEVELS[action];
        let dose = Dose {
            calories: dose_in_level(&mut rng, cfg.thresholds.cuts(Component::Calories), cal),
            protein: dose_in_level(&mut rng, cfg.thresholds.cuts(Component::Protein), pro),
            water: dose_in_level(&mut rng, cfg.thresholds.cuts(Component::Water), water),
        };

        let insulin = if glucose > 180.0 { ((glucose - 150.0) / 30.0).round() } else { 0.0 };
        insulin_24h.pop_front();
        insulin_24h.push_back(insulin);
        let sofa = (sev + normal(&mut rng, 0.0, 0.4)).round().clamp(0.0, 24.0);
        let mut window = observe_window(
            &mut rng,
            cfg,
            t_index,
            k,
            (k % 6 == 0).then_some(weight),
            Latent { sev, sofa, lactate, glucose, phosphate, urine_ml },
            Feeding {
                prev_calories: prev_dose.map(|d| d.calories),
                prev_protein: prev_dose.map(|d| d.protein),
                prev_water: prev_dose.map(|d| d.water),
                cum_calories: Some(cum_cal),
                cum_protein: Some(cum_pro),
            },
            Context { mech_vent, crrt, insulin, insulin_24h: insulin_24h.iter().sum(), hours_en },
        );
        window.dose_administered = dose;
        windows.push(window);
        cum_cal += dose.calories;
        cum_pro += dose.protein;
        prev_dose = Some(dose);

        // transition
        let m_cal = cal as f64 - ideal.cal as f64;
        let m_pro = pro as f64 - ideal.pro as f64;
        let m_water = water as f64 - ideal.water as f64;
        let mismatch = m_cal.abs() + m_pro.abs() + m_water.abs();
        sev += 0.1 * (sev0 - sev) + e * SEVERITY_HARM * mismatch + normal(&mut rng, 0.0, 0.35);
        sev = sev.clamp(0.0, 24.0);
        let lactate_target = 0.8 + 0.12 * sev + e * LACTATE_HARM * m_water.abs();
        lactate = (lactate + 0.35 * (lactate_target - lactate) + normal(&mut rng, 0.0, 0.12)).max(0.3);
        glucose += 0.5 * (glucose_base - glucose) + e * GLUCOSE_PER_LEVEL * m_cal - 5.0 * insulin
            + normal(&mut rng, 0.0, 6.0);
        glucose = glucose.clamp(40.0, 600.0);
        phosphate += 0.5 * (phosphate_base - phosphate) + e * PHOSPHATE_PER_LEVEL * m_pro
            + normal(&mut rng, 0.0, 0.15);
        phosphate = phosphate.clamp(0.5, 10.0);
        log_urine += 0.2 * (urine_base.ln() - log_urine) + normal(&mut rng, 0.0, 0.15);
        weight += normal(&mut rng, 0.0, 0.1);
        deviation_sum += deviation(glucose, reward_ranges.glucose_range)
            + deviation(phosphate, reward_ranges.phosphate_range);
    }

    let linear_predictor = MORTALITY_SEVERITY * (sev - 6.0)
        + MORTALITY_AGE * (age - 65.0)
        + e * MORTALITY_DEVIATION * deviation_sum / n_windows as f64;
    let record = PatientRecord {
        patient_id: format!("P{index:06}"),
        age,
        gender,
        weight_kg,
        height_cm,
        icu_readmission,
        comorbidities,
        icu_stay_hours,
        mortality: 0,
        windows,
    };
    Simulated { record, linear_predictor, mortality_draw: rng.gen() }
}

struct Latent {
    sev: f64,
    sofa: f64,
    lactate: f64,
    glucose: f64,
    phosphate: f64,
    urine_ml: f64,
}

struct Context {
    mech_vent: u8,
    crrt: bool,
    insulin: f64,
    insulin_24h: f64,
    hours_en: f64,
}

/// Noisy, partially missing measurements of one window. The four reward
/// variables are always observed in the first window.
#[allow(clippy::too_many_arguments)]
fn observe_window(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    t_index: u32,
    k: u32,
    weight_kg: Option<f64>,
    x: Latent,
    feeding: Feeding,
    ctx: Context,
) -> TimeWindow {
    let s = x.sev;
    let lab = |rng: &mut ChaCha8Rng, always: bool, mean: f64, sd: f64, lo: f64, hi: f64| {
        if !always && rng.gen_bool(cfg.missing_rate) {
            None
        } else {
            Some(normal(rng, mean, sd).clamp(lo, hi))
        }
    };
    let first = k == 0;
    let hr = normal(rng, 85.0 + 1.5 * s, 12.0).clamp(35.0, 180.0);
    let sbp = normal(rng, 122.0 - 1.5 * s, 15.0).clamp(60.0, 220.0);
    let dbp = normal(rng, 62.0 - 0.5 * s, 9.0).clamp(30.0, 120.0);
    let pao2 = normal(rng, 110.0 - 2.0 * s, 25.0).clamp(40.0, 400.0);
    let fio2 = if ctx.mech_vent == 1 { normal(rng, 0.4 + 0.015 * s, 0.08).clamp(0.21, 1.0) } else { 0.21 };
    let vitals = Vitals {
        hr: Some(hr),
        sbp: Some(sbp),
        mbp: Some((sbp + 2.0 * dbp) / 3.0),
        dbp: Some(dbp),
        resp_rate: Some(normal(rng, 19.0 + 0.4 * s, 4.0).clamp(6.0, 50.0)),
        temperature: Some(normal(rng, 37.0 + 0.05 * s, 0.5).clamp(34.0, 41.0)),
        paco2: lab(rng, false, 40.0, 6.0, 20.0, 90.0),
        pao2: Some(pao2),
        pf_ratio: Some(pao2 / fio2),
        spo2: Some(normal(rng, 97.0 - 0.2 * s, 1.8).clamp(80.0, 100.0)),
        sofa: Some(x.sofa),
        gcs: Some((15.0 - 0.5 * s + normal(rng, 0.0, 1.5)).round().clamp(3.0, 15.0)),
        shock_index: Some(hr / sbp),
    };
    let glucose = if first || !rng.gen_bool(cfg.missing_rate * 0.3) { Some(x.glucose) } else { None };
    let phosphate = if first || !rng.gen_bool(cfg.missing_rate) { Some(x.phosphate) } else { None };
    let lactate = if first || !rng.gen_bool(cfg.missing_rate) { Some(x.lactate) } else { None };
    let labs = Labs {
        albumin: lab(rng, false, 3.0 - 0.05 * s, 0.5, 1.0, 5.5),
        ph: lab(rng, false, 7.39 - 0.005 * s, 0.05, 6.8, 7.7),
        calcium: lab(rng, false, 8.4, 0.6, 5.0, 12.0),
        glucose,
        hemoglobin: lab(rng, false, 9.8, 1.5, 5.0, 17.0),
        magnesium: lab(rng, false, 2.1, 0.3, 1.0, 4.0),
        wbc: lab(rng, false, 11.0 + 0.4 * s, 4.0, 0.5, 60.0),
        creatinine: lab(rng, false, 1.1 + 0.08 * s, 0.5, 0.2, 12.0),
        bicarbonate: lab(rng, false, 24.0 - 0.3 * s, 3.0, 8.0, 45.0),
        sodium: lab(rng, false, 139.0, 4.0, 115.0, 165.0),
        lactate,
        chloride: lab(rng, false, 104.0, 5.0, 80.0, 130.0),
        platelets: lab(rng, false, 210.0 - 6.0 * s, 70.0, 5.0, 900.0),
        potassium: lab(rng, false, 4.1, 0.5, 2.5, 7.0),
        ptt: lab(rng, false, 35.0 + 0.8 * s, 8.0, 20.0, 150.0),
        pt: lab(rng, false, 14.0 + 0.3 * s, 2.5, 9.0, 60.0),
        ast: lab(rng, false, 45.0 + 4.0 * s, 30.0, 5.0, 3000.0),
        alt: lab(rng, false, 40.0 + 3.0 * s, 25.0, 5.0, 3000.0),
        bun: lab(rng, false, 25.0 + 2.0 * s, 12.0, 2.0, 200.0),
        inr: lab(rng, false, 1.2 + 0.03 * s, 0.25, 0.8, 8.0),
        ionised_calcium: lab(rng, false, 1.12, 0.08, 0.7, 1.6),
        total_bilirubin: lab(rng, false, 0.9 + 0.15 * s, 0.6, 0.1, 30.0),
        base_excess: lab(rng, false, -0.5 * s + 1.0, 3.0, -25.0, 20.0),
        phosphate,
    };
    let treatments = Treatments {
        mechanical_ventilation: Some(ctx.mech_vent as f64),
        fio2: Some(fio2),
        crrt: Some(ctx.crrt as u8 as f64),
        iv_fluids: Some(normal(rng, 300.0 + 15.0 * s, 120.0).max(0.0)),
        vasopressor_dose: Some(if s > 8.0 { 0.02 * (s - 8.0) } else { 0.0 }),
        propofol_dose: Some(if ctx.mech_vent == 1 { normal(rng, 20.0, 8.0).max(0.0) } else { 0.0 }),
        insulin_dose: Some(ctx.insulin),
        insulin_24h: Some(ctx.insulin_24h),
    };
    let others = Others {
        urine_output_4h: Some(x.urine_ml),
        total_output: Some(x.urine_ml + normal(rng, 60.0, 20.0).max(0.0)),
        hours_since_en_start: Some(ctx.hours_en),
    };
    TimeWindow {
        t_index,
        weight_kg,
        vitals,
        labs,
        feeding,
        treatments,
        others,
        dose_administered: Dose { calories: 0.0, protein: 0.0, water: 0.0 },
    }
}
