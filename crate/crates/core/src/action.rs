//! Discrete nutrition actions.
//!
//! Each of calories, protein and water is binned into four ordinal levels by
//! per-4-hour weight-adjusted quantile cut-points. Of the 64 level triples only
//! 51 occur in practice; those carry a canonical id in `0..51` and form the
//! action set every policy and network head works over.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 51;
pub const N_LEVELS: u8 = 4;

/// Canonical `(calorie, protein, water)` levels, indexed by action id.
pub const ACTION_LEVELS: [(u8, u8, u8); N_ACTIONS] = [
    (1, 1, 1),
    (4, 4, 4),
    (4, 4, 3),
    (2, 2, 1),
    (4, 4, 2),
    (3, 3, 2),
    (1, 1, 2),
    (2, 2, 2),
    (1, 1, 4),
    (1, 1, 3),
    (3, 3, 3),
    (2, 2, 3),
    (3, 3, 1),
    (2, 2, 4),
    (3, 3, 4),
    (4, 3, 4),
    (3, 4, 2),
    (2, 3, 2),
    (3, 4, 3),
    (1, 2, 1),
    (4, 3, 3),
    (3, 2, 4),
    (2, 3, 1),
    (3, 2, 3),
    (2, 1, 4),
    (3, 4, 4),
    (3, 2, 2),
    (2, 3, 3),
    (4, 3, 2),
    (3, 2, 1),
    (4, 4, 1),
    (2, 1, 3),
    (1, 2, 2),
    (2, 3, 4),
    (2, 1, 2),
    (1, 2, 3),
    (4, 3, 1),
    (2, 1, 1),
    (3, 4, 1),
    (1, 2, 4),
    (4, 2, 4),
    (3, 1, 4),
    (2, 4, 1),
    (2, 4, 2),
    (4, 2, 3),
    (2, 4, 3),
    (1, 3, 1),
    (2, 4, 4),
    (3, 1, 3),
    (4, 2, 2),
    (1, 3, 2),
];

/// Observed frequency of each action id in the reference cohort.
pub const REFERENCE_ACTION_COUNTS: [u32; N_ACTIONS] = [
    21268, 15932, 13241, 11755, 9322, 9179, 9000, 8683, 8392, 8093, 7969, 6763, 5740, 5536, 5458,
    5169, 4777, 4695, 4644, 4325, 4253, 4098, 3993, 3485, 3434, 3266, 3147, 3128, 2980, 2352, 2337,
    2232, 1955, 1774, 1578, 1384, 1218, 1205, 1179, 1062, 1037, 535, 385, 368, 324, 311, 272, 249,
    163, 162, 147,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Calories,
    Protein,
    Water,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Calories, Component::Protein, Component::Water];

    pub fn name(self) -> &'static str {
        match self {
            Component::Calories => "calories",
            Component::Protein => "protein",
            Component::Water => "water",
        }
    }
}

/// A level triple, each level in `1..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionCode {
    pub cal: u8,
    pub pro: u8,
    pub water: u8,
}

impl ActionCode {
    pub fn new(cal: u8, pro: u8, water: u8) -> Result<Self> {
        for (name, l) in [("calorie", cal), ("protein", pro), ("water", water)] {
            if !(1..=N_LEVELS).contains(&l) {
                return Err(Error::Domain(format!("{name} level {l} outside 1..=4")));
            }
        }
        Ok(Self { cal, pro, water })
    }

    pub fn from_id(id: usize) -> Result<Self> {
        let &(cal, pro, water) = ACTION_LEVELS
            .get(id)
            .ok_or_else(|| Error::Domain(format!("action id {id} outside 0..{N_ACTIONS}")))?;
        Ok(Self { cal, pro, water })
    }

    /// Canonical id, or `None` for the 13 unobserved triples.
    pub fn id(&self) -> Option<usize> {
        ACTION_LEVELS
            .iter()
            .position(|&(c, p, w)| c == self.cal && p == self.pro && w == self.water)
    }

    pub fn is_observed(&self) -> bool {
        self.id().is_some()
    }

    pub fn level(&self, component: Component) -> u8 {
        match component {
            Component::Calories => self.cal,
            Component::Protein => self.pro,
            Component::Water => self.water,
        }
    }
}

/// Level of `component` for action `id`. Panics on an out-of-range id.
pub fn level_of(id: usize, component: Component) -> u8 {
    let (c, p, w) = ACTION_LEVELS[id];
    match component {
        Component::Calories => c,
        Component::Protein => p,
        Component::Water => w,
    }
}

/// Upper cut-points of levels 1..3 per component, per 4-hour window and kg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileThresholds {
    /// kcal/kg
    pub calories: [f64; 3],
    /// g/kg
    pub protein: [f64; 3],
    /// ml/kg
    pub water: [f64; 3],
}

impl Default for QuantileThresholds {
    fn default() -> Self {
        Self {
            calories: [1.91, 3.05, 4.13],
            protein: [0.08, 0.14, 0.19],
            water: [3.61, 5.40, 8.15],
        }
    }
}

impl QuantileThresholds {
    pub fn validate(&self) -> Result<()> {
        for c in Component::ALL {
            let t = self.cuts(c);
            let ok = t[0] > 0.0 && t[0] < t[1] && t[1] < t[2] && t.iter().all(|x| x.is_finite());
            if !ok {
                return Err(Error::Config(format!(
                    "{} thresholds must be positive and strictly increasing, got {t:?}",
                    c.name()
                )));
            }
        }
        Ok(())
    }

    pub fn cuts(&self, component: Component) -> &[f64; 3] {
        match component {
            Component::Calories => &self.calories,
            Component::Protein => &self.protein,
            Component::Water => &self.water,
        }
    }

    /// Bins are left-open, right-closed: a dose exactly on a cut-point falls
    /// in the lower level.
    pub fn level(&self, component: Component, dose: f64) -> u8 {
        let cuts = self.cuts(component);
        1 + cuts.iter().filter(|&&t| dose > t).count() as u8
    }

    /// Refit cut-points to the empirical quartiles of observed doses.
    pub fn fit(calories: &[f64], protein: &[f64], water: &[f64]) -> Result<Self> {
        fn quartiles(name: &str, xs: &[f64]) -> Result<[f64; 3]> {
            if xs.is_empty() {
                return Err(Error::Empty(format!("no {name} doses to fit thresholds")));
            }
            let mut v = xs.to_vec();
            v.sort_by(f64::total_cmp);
            let q = |p: f64| {
                let pos = p * (v.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
            };
            Ok([q(0.25), q(0.5), q(0.75)])
        }
        let t = Self {
            calories: quartiles("calorie", calories)?,
            protein: quartiles("protein", protein)?,
            water: quartiles("water", water)?,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Map a weight-adjusted 4-hour dose to its level triple.
///
/// The returned code may be one of the unobserved triples; check
/// [`ActionCode::id`] before using it as an action.
pub fn discretize_dose(
    calories: f64,
    protein: f64,
    water: f64,
    thresholds: &QuantileThresholds,
) -> Result<ActionCode> {
    for (name, v) in [("calories", calories), ("protein", protein), ("water", water)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("{name} dose must be > 0, got {v}")));
        }
    }
    Ok(ActionCode {
        cal: thresholds.level(Component::Calories, calories),
        pro: thresholds.level(Component::Protein, protein),
        water: thresholds.level(Component::Water, water),
    })
}

/// Nearest observed action (L1 over levels, ties to the lower id).
pub fn nearest_observed(code: ActionCode) -> usize {
    if let Some(id) = code.id() {
        return id;
    }
    let dist = |&(c, p, w): &(u8, u8, u8)| {
        c.abs_diff(code.cal) as u32 + p.abs_diff(code.pro) as u32 + w.abs_diff(code.water) as u32
    };
    let mut best = 0;
    for id in 1..N_ACTIONS {
        if dist(&ACTION_LEVELS[id]) < dist(&ACTION_LEVELS[best]) {
            best = id;
        }
    }
    best
}
