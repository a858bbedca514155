//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns a JSON string, so the page
//! needs no generated TypeScript types.

use enteral_rl::action::{discretize_dose, nearest_observed, ActionCode, QuantileThresholds};
use enteral_rl::featurize::{DecisionContext, PatientMeta};
use enteral_rl::policy::{guideline_doses, ideal_body_weight, GuidelineParams};
use enteral_rl::reward::{biomarker_reward, deviation, shaping_f, RewardConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn error_json(msg: impl std::fmt::Display) -> String {
    to_json(&serde_json::json!({ "error": msg.to_string() }))
}

#[derive(Serialize)]
struct ShapingCurve {
    xs: Vec<f64>,
    f: Vec<f64>,
    deviation: Vec<f64>,
    transition: TransitionReward,
}

#[derive(Serialize)]
struct TransitionReward {
    before: f64,
    after: f64,
    shaping_after: f64,
    deviation_before: f64,
    deviation_after: f64,
    reward: f64,
}

/// Shaping and deviation curves over `[lo, hi]`, plus the biomarker reward
/// for moving from `before` to `after`.
#[wasm_bindgen]
pub fn shaping_explorer(
    range_min: f64,
    range_max: f64,
    lo: f64,
    hi: f64,
    points: usize,
    before: f64,
    after: f64,
    epsilon: f64,
) -> String {
    if !(range_min < range_max) || !(lo < hi) || points < 2 {
        return error_json("need range_min < range_max, lo < hi and at least 2 points");
    }
    let range = [range_min, range_max];
    let xs: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    to_json(&ShapingCurve {
        f: xs.iter().map(|&x| shaping_f(x, range)).collect(),
        deviation: xs.iter().map(|&x| deviation(x, range)).collect(),
        transition: TransitionReward {
            before,
            after,
            shaping_after: shaping_f(after, range),
            deviation_before: deviation(before, range),
            deviation_after: deviation(after, range),
            reward: biomarker_reward(before, after, range, epsilon),
        },
        xs,
    })
}

/// Default target ranges and bonus weight, for initializing the page.
#[wasm_bindgen]
pub fn reward_defaults() -> String {
    let c = RewardConfig::default();
    to_json(&serde_json::json!({
        "glucose_range": c.glucose_range,
        "phosphate_range": c.phosphate_range,
        "epsilon": c.epsilon,
    }))
}

#[derive(Serialize)]
struct Discretized {
    levels: [u8; 3],
    id: Option<usize>,
    nearest_id: usize,
    nearest_levels: [u8; 3],
}

fn discretized(code: ActionCode) -> Discretized {
    let nearest = nearest_observed(code);
    let n = ActionCode::from_id(nearest).expect("nearest id is valid");
    Discretized {
        levels: [code.cal, code.pro, code.water],
        id: code.id(),
        nearest_id: nearest,
        nearest_levels: [n.cal, n.pro, n.water],
    }
}

/// Levels and action id for per-kg doses over one 4-hour window.
#[wasm_bindgen]
pub fn discretize(calories: f64, protein: f64, water: f64) -> String {
    match discretize_dose(calories, protein, water, &QuantileThresholds::default()) {
        Ok(code) => to_json(&discretized(code)),
        Err(e) => error_json(e),
    }
}

#[derive(Serialize)]
struct GuidelineTargets {
    bmi: f64,
    ideal_body_weight: f64,
    daily: [f64; 3],
    per_window: [f64; 3],
    action: Discretized,
}

/// Guideline targets for one patient and decision time.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn guideline(
    height_cm: f64,
    weight_kg: f64,
    female: bool,
    burns: bool,
    crrt: bool,
    icu_day: u32,
    feeding_day: u32,
) -> String {
    let params = GuidelineParams::default();
    let meta = PatientMeta { female, height_cm, weight_kg, burns };
    let ctx = DecisionContext { icu_day, feeding_day, crrt };
    let (c, p, w) = match guideline_doses(&meta, &ctx, &params) {
        Ok(d) => d,
        Err(e) => return error_json(e),
    };
    let code = match discretize_dose(c, p, w, &QuantileThresholds::default()) {
        Ok(code) => code,
        Err(e) => return error_json(e),
    };
    let per_day = params.windows_per_day;
    to_json(&GuidelineTargets {
        bmi: weight_kg / (height_cm / 100.0).powi(2),
        ideal_body_weight: ideal_body_weight(height_cm, female),
        daily: [c * per_day, p * per_day, w * per_day],
        per_window: [c, p, w],
        action: discretized(code),
    })
}
