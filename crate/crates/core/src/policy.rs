//! Treatment policies as per-window distributions over the 51 actions.

use std::path::PathBuf;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::action::{discretize_dose, nearest_observed, QuantileThresholds, N_ACTIONS};
use crate::error::{Error, Result};
use crate::featurize::{DecisionContext, Episode, PatientMeta};
use crate::nn::{softmax_rows, Checkpoint, Head, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Clinician,
    Bc,
    Guideline,
    Deepen,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Deepen,
        PolicyKind::Guideline,
        PolicyKind::Bc,
        PolicyKind::Clinician,
        PolicyKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Clinician => "clinician",
            PolicyKind::Bc => "bc",
            PolicyKind::Guideline => "guideline",
            PolicyKind::Deepen => "deepen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

pub trait Policy {
    fn kind(&self) -> PolicyKind;

    /// One row per window of `episode`, each a distribution over actions.
    fn distributions(&self, episode: &Episode) -> Result<Array2<f64>>;

    /// Whether every row puts all mass on a single action.
    fn is_deterministic(&self) -> bool;
}

pub fn uniform() -> Vec<f64> {
    vec![1.0 / N_ACTIONS as f64; N_ACTIONS]
}

pub fn one_hot(action: usize) -> Vec<f64> {
    let mut v = vec![0.0; N_ACTIONS];
    v[action] = 1.0;
    v
}

fn rows(actions: impl ExactSizeIterator<Item = usize>) -> Array2<f64> {
    let n = actions.len();
    let mut out = Array2::zeros((n, N_ACTIONS));
    for (t, a) in actions.enumerate() {
        out[[t, a]] = 1.0;
    }
    out
}

pub fn episode_states(episode: &Episode) -> Array2<f64> {
    let n = episode.states.len();
    let d = episode.states.first().map_or(0, Vec::len);
    Array2::from_shape_fn((n, d), |(t, j)| episode.states[t][j])
}

pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Random
    }

    fn distributions(&self, episode: &Episode) -> Result<Array2<f64>> {
        Ok(Array2::from_elem((episode.len(), N_ACTIONS), 1.0 / N_ACTIONS as f64))
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Replays the logged actions.
pub struct ClinicianPolicy;

impl Policy for ClinicianPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Clinician
    }

    fn distributions(&self, episode: &Episode) -> Result<Array2<f64>> {
        Ok(rows(episode.actions.iter().copied()))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Behavior-cloning classifier: softmax over the logit head.
pub struct BcPolicy {
    pub net: Network,
}

impl BcPolicy {
    pub fn new(net: Network) -> Result<Self> {
        if net.arch.head != Head::Logits || net.arch.n_actions != N_ACTIONS {
            return Err(Error::Schema("behavior-cloning policy needs a 51-way logit network".into()));
        }
        Ok(Self { net })
    }

    pub fn probabilities(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.net.forward(states)?))
    }
}

impl Policy for BcPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Bc
    }

    fn distributions(&self, episode: &Episode) -> Result<Array2<f64>> {
        self.probabilities(episode_states(episode).view())
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Argmax of a Q-network; ties go to the lowest action id.
pub struct GreedyPolicy {
    pub net: Network,
}

impl GreedyPolicy {
    pub fn new(net: Network) -> Result<Self> {
        if net.arch.head != Head::Dueling || net.arch.n_actions != N_ACTIONS {
            return Err(Error::Schema("greedy policy needs a 51-action dueling network".into()));
        }
        Ok(Self { net })
    }

    pub fn actions(&self, states: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.net.forward(states)?))
    }
}

pub fn argmax_rows(q: &Array2<f64>) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (a, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

impl Policy for GreedyPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Deepen
    }

    fn distributions(&self, episode: &Episode) -> Result<Array2<f64>> {
        let actions = self.actions(episode_states(episode).view())?;
        Ok(rows(actions.into_iter()))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidelineParams {
    /// kcal/kg/day for BMI < 30, 30..=50, > 50.
    pub calorie_tiers: [f64; 3],
    pub early_factor: f64,
    /// Feeding days that get the early factor.
    pub early_days: u32,
    /// g/kg/day on ICU days 1-2 and 3-4.
    pub protein_early: [f64; 2],
    /// Stable phase: g/kg actual weight for BMI < 30, then g/kg ideal body
    /// weight for BMI 30..=40 and > 40.
    pub protein_stable: [f64; 3],
    pub protein_burns: f64,
    pub protein_crrt: f64,
    /// ml per kcal
    pub water_per_kcal: f64,
    pub windows_per_day: f64,
}

impl Default for GuidelineParams {
    fn default() -> Self {
        Self {
            calorie_tiers: [25.0, 22.0, 11.0],
            early_factor: 0.7,
            early_days: 3,
            protein_early: [0.8, 1.0],
            protein_stable: [1.2, 2.0, 2.5],
            protein_burns: 2.0,
            protein_crrt: 2.5,
            water_per_kcal: 1.5,
            windows_per_day: 6.0,
        }
    }
}

impl GuidelineParams {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .calorie_tiers
            .iter()
            .chain(&self.protein_early)
            .chain(&self.protein_stable)
            .chain([&self.early_factor, &self.protein_burns, &self.protein_crrt])
            .chain([&self.water_per_kcal, &self.windows_per_day]);
        for v in all {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("guideline parameters must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Devine ideal body weight in kg.
pub fn ideal_body_weight(height_cm: f64, female: bool) -> f64 {
    let inches = height_cm / 2.54;
    let base = if female { 45.5 } else { 50.0 };
    base + 2.3 * (inches - 60.0)
}

/// Per-window weight-adjusted targets (kcal/kg, g/kg, ml/kg).
pub fn guideline_doses(
    meta: &PatientMeta,
    ctx: &DecisionContext,
    params: &GuidelineParams,
) -> Result<(f64, f64, f64)> {
    if !(meta.height_cm > 0.0) || !(meta.weight_kg > 0.0) {
        return Err(Error::Domain(format!(
            "guideline policy needs height and weight, got height {} cm, weight {} kg",
            meta.height_cm, meta.weight_kg
        )));
    }
    let bmi = meta.weight_kg / (meta.height_cm / 100.0).powi(2);
    let mut kcal = if bmi < 30.0 {
        params.calorie_tiers[0]
    } else if bmi <= 50.0 {
        params.calorie_tiers[1]
    } else {
        params.calorie_tiers[2]
    };
    if ctx.feeding_day <= params.early_days {
        kcal *= params.early_factor;
    }

    let per_ibw = |g_per_kg_ibw: f64| g_per_kg_ibw * ideal_body_weight(meta.height_cm, meta.female) / meta.weight_kg;
    let protein = if ctx.crrt {
        params.protein_crrt
    } else if meta.burns {
        params.protein_burns
    } else if ctx.icu_day <= 2 {
        params.protein_early[0]
    } else if ctx.icu_day <= 4 {
        params.protein_early[1]
    } else if bmi < 30.0 {
        params.protein_stable[0]
    } else if bmi <= 40.0 {
        per_ibw(params.protein_stable[1])
    } else {
        per_ibw(params.protein_stable[2])
    };
    let water = params.water_per_kcal * kcal;
    let w = params.windows_per_day;
    Ok((kcal / w, protein / w, water / w))
}

pub fn guideline_action(
    meta: &PatientMeta,
    ctx: &DecisionContext,
    params: &GuidelineParams,
    thresholds: &QuantileThresholds,
) -> Result<usize> {
    let (c, p, w) = guideline_doses(meta, ctx, params)?;
    Ok(nearest_observed(discretize_dose(c, p, w, thresholds)?))
}

/// Weight-based feeding rules; reads only patient metadata and day counters.
pub struct GuidelinePolicy {
    pub params: GuidelineParams,
    pub thresholds: QuantileThresholds,
}

impl Policy for GuidelinePolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Guideline
    }

    fn distributions(&self, episode: &Episode) -> Result<Array2<f64>> {
        let actions = episode
            .contexts
            .iter()
            .map(|ctx| guideline_action(&episode.meta, ctx, &self.params, &self.thresholds))
            .collect::<Result<Vec<_>>>()?;
        Ok(rows(actions.into_iter()))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Checkpoint for `bc` and `deepen`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub guideline: GuidelineParams,
}

impl PolicySpec {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, checkpoint: None, guideline: GuidelineParams::default() }
    }

    pub fn build(&self, thresholds: &QuantileThresholds) -> Result<Box<dyn Policy>> {
        let checkpoint = || -> Result<Network> {
            let path = self.checkpoint.as_ref().ok_or_else(|| {
                Error::Config(format!("policy `{}` needs a checkpoint", self.kind.name()))
            })?;
            Ok(Checkpoint::load(path)?.network())
        };
        Ok(match self.kind {
            PolicyKind::Random => Box::new(RandomPolicy),
            PolicyKind::Clinician => Box::new(ClinicianPolicy),
            PolicyKind::Bc => Box::new(BcPolicy::new(checkpoint()?)?),
            PolicyKind::Deepen => Box::new(GreedyPolicy::new(checkpoint()?)?),
            PolicyKind::Guideline => {
                self.guideline.validate()?;
                Box::new(GuidelinePolicy { params: self.guideline.clone(), thresholds: thresholds.clone() })
            }
        })
    }
}
