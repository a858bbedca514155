//! Off-policy evaluation.
//!
//! Values are estimated with consistent weighted per-decision importance
//! sampling (CWPDIS). Trajectories that have ended keep their last weight and
//! contribute zero reward, so equal evaluation and behavior policies give the
//! plain mean discounted return. Estimated mortality comes from a binned
//! return-to-mortality calibration over the logged trajectories.

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::action::{level_of, Component, N_ACTIONS};
use crate::error::{Error, Result};
use crate::featurize::Episode;
use crate::reward::{deviation, RewardConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpeConfig {
    pub gamma: f64,
    /// Floor applied to behavior probabilities before renormalizing.
    pub behavior_floor: f64,
    /// Uniform mixing weight applied to evaluated policies.
    pub kappa: f64,
    pub calibration_bins: usize,
    pub bootstrap: usize,
    /// Deviation bins with fewer steps are reported but not used for the
    /// minimum-at-zero check.
    pub min_bin_count: usize,
    pub seed: u64,
}

impl Default for OpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            behavior_floor: 1e-3,
            kappa: 0.01,
            calibration_bins: 10,
            bootstrap: 1000,
            min_bin_count: 50,
            seed: 0,
        }
    }
}

impl OpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("ope.gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.behavior_floor > 0.0 && self.behavior_floor * (N_ACTIONS as f64) < 1.0) {
            return Err(Error::Config(format!("ope.behavior_floor {} out of range", self.behavior_floor)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::Config(format!("ope.kappa must be in [0, 1], got {}", self.kappa)));
        }
        if self.calibration_bins == 0 {
            return Err(Error::Config("ope.calibration_bins must be positive".into()));
        }
        Ok(())
    }
}

/// One logged decision as seen by the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedStep {
    pub reward: f64,
    /// Evaluation-policy probability of the logged action.
    pub p_eval: f64,
    /// Behavior-policy probability of the logged action.
    pub p_behavior: f64,
}

pub fn cwpdis(trajectories: &[Vec<LoggedStep>], gamma: f64) -> Result<f64> {
    let refs: Vec<&[LoggedStep]> = trajectories.iter().map(Vec::as_slice).collect();
    cwpdis_refs(&refs, gamma)
}

fn cwpdis_refs(trajectories: &[&[LoggedStep]], gamma: f64) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::Empty("no trajectories to evaluate".into()));
    }
    let horizon = trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut log_w = vec![0.0f64; trajectories.len()];
    let mut value = 0.0;
    let mut discount = 1.0;
    for t in 0..horizon {
        for (n, traj) in trajectories.iter().enumerate() {
            if let Some(s) = traj.get(t) {
                log_w[n] += s.p_eval.ln() - s.p_behavior.ln();
            }
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            // zero total weight: this step and all later ones contribute 0
            break;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (n, traj) in trajectories.iter().enumerate() {
            let w = (log_w[n] - max).exp();
            den += w;
            if let Some(s) = traj.get(t) {
                num += w * s.reward;
            }
        }
        value += discount * num / den;
        discount *= gamma;
    }
    Ok(value)
}

/// Floor every probability at `floor` and renormalize the row.
pub fn floor_probabilities(probs: &mut Array2<f64>, floor: f64) {
    for mut row in probs.rows_mut() {
        row.mapv_inplace(|p| p.max(floor));
        let s = row.sum();
        row /= s;
    }
}

/// Mix with the uniform distribution: `(1 - kappa) p + kappa / 51`.
pub fn smooth(probs: &mut Array2<f64>, kappa: f64) {
    let u = kappa / probs.ncols() as f64;
    probs.mapv_inplace(|p| (1.0 - kappa) * p + u);
}

/// Inverse-CDF draw from one distribution row.
pub fn sample_action(row: ArrayView1<f64>, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen::<f64>() * row.sum();
    let mut acc = 0.0;
    for (a, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Logged steps of `episodes` under per-episode evaluation and behavior
/// distributions (already smoothed / floored as desired).
pub fn logged_steps(
    episodes: &[Episode],
    eval: &[Array2<f64>],
    behavior: &[Array2<f64>],
) -> Result<Vec<Vec<LoggedStep>>> {
    if eval.len() != episodes.len() || behavior.len() != episodes.len() {
        return Err(Error::Dimension { expected: episodes.len(), got: eval.len().min(behavior.len()) });
    }
    episodes
        .iter()
        .zip(eval.iter().zip(behavior))
        .map(|(e, (pe, pb))| {
            if pe.nrows() != e.len() || pb.nrows() != e.len() {
                return Err(Error::Dimension { expected: e.len(), got: pe.nrows() });
            }
            Ok(e.actions
                .iter()
                .enumerate()
                .map(|(t, &a)| LoggedStep { reward: e.rewards[t], p_eval: pe[[t, a]], p_behavior: pb[[t, a]] })
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    /// Mean return of the bin; interpolation anchor.
    pub center: f64,
    pub count: usize,
    pub deaths: usize,
    pub mortality: f64,
    /// Normal-approximation 95% interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
    pub spearman_rho: f64,
    pub spearman_p: f64,
}

impl CalibrationCurve {
    /// Piecewise-linear mortality at `value` between bin centers; flat beyond
    /// the outer centers. The flag is set when `value` lies outside the range
    /// of calibrated returns.
    pub fn interpolate(&self, value: f64) -> (f64, bool) {
        let b = &self.bins;
        let last = b.len() - 1;
        let outside = value < b[0].lo || value > b[last].hi;
        if value <= b[0].center {
            return (b[0].mortality, outside);
        }
        if value >= b[last].center {
            return (b[last].mortality, outside);
        }
        for k in 0..last {
            let (l, r) = (&b[k], &b[k + 1]);
            if value <= r.center {
                let span = r.center - l.center;
                if span <= 0.0 {
                    return (r.mortality, false);
                }
                let f = (value - l.center) / span;
                return (l.mortality + f * (r.mortality - l.mortality), false);
            }
        }
        (b[last].mortality, false)
    }
}

/// Average ranks (ties share the mean rank).
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation with a two-sided t-approximation p-value. Constant
/// input gives `(0, 1)`.
pub fn spearman(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n < 3 {
        return (0.0, 1.0);
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let m = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (rx[i] - m, ry[i] - m);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, 1.0);
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if rho.abs() >= 1.0 {
        return (rho, 0.0);
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()));
    (rho, p)
}

/// Equal-count bins over per-trajectory returns with their mortality.
pub fn return_mortality_curve(returns: &[f64], died: &[bool], n_bins: usize) -> Result<CalibrationCurve> {
    if returns.len() != died.len() {
        return Err(Error::Dimension { expected: returns.len(), got: died.len() });
    }
    let n = returns.len();
    if n_bins == 0 || n_bins > n {
        return Err(Error::Domain(format!("{n_bins} bins requested for {n} trajectories")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]).then(a.cmp(&b)));
    let mut bins = Vec::with_capacity(n_bins);
    for k in 0..n_bins {
        let members = &order[k * n / n_bins..(k + 1) * n / n_bins];
        let count = members.len();
        let deaths = members.iter().filter(|&&i| died[i]).count();
        let rate = deaths as f64 / count as f64;
        let half = 1.96 * (rate * (1.0 - rate) / count as f64).sqrt();
        bins.push(CalibrationBin {
            lo: returns[members[0]],
            hi: returns[*members.last().unwrap()],
            center: members.iter().map(|&i| returns[i]).sum::<f64>() / count as f64,
            count,
            deaths,
            mortality: rate,
            ci_low: (rate - half).max(0.0),
            ci_high: (rate + half).min(1.0),
        });
    }
    let y: Vec<f64> = died.iter().map(|&d| d as u8 as f64).collect();
    let (spearman_rho, spearman_p) = spearman(returns, &y);
    Ok(CalibrationCurve { bins, spearman_rho, spearman_p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalityEstimate {
    pub value: f64,
    pub mortality: f64,
    /// Bootstrap standard deviation of the mortality estimate.
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// The policy value fell outside the calibrated return range.
    pub clamped: bool,
}

/// Everything the mortality estimate needs, per logged trajectory.
pub struct CalibrationData<'a> {
    pub returns: &'a [f64],
    pub died: &'a [bool],
}

/// CWPDIS value of a policy mapped through the calibration curve, with a
/// trajectory-level bootstrap that resamples both the value and the curve.
pub fn estimate_policy_mortality(
    steps: &[Vec<LoggedStep>],
    calibration: &CalibrationData,
    cfg: &OpeConfig,
) -> Result<MortalityEstimate> {
    let n = steps.len();
    if n != calibration.returns.len() {
        return Err(Error::Dimension { expected: n, got: calibration.returns.len() });
    }
    let value = cwpdis(steps, cfg.gamma)?;
    let curve = return_mortality_curve(calibration.returns, calibration.died, cfg.calibration_bins)?;
    let (mortality, clamped) = curve.interpolate(value);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draws = Vec::with_capacity(cfg.bootstrap);
    let mut idx = vec![0usize; n];
    let mut rs = vec![0.0; n];
    let mut ds = vec![false; n];
    for _ in 0..cfg.bootstrap {
        for i in idx.iter_mut() {
            *i = rng.gen_range(0..n);
        }
        let sub: Vec<&[LoggedStep]> = idx.iter().map(|&i| steps[i].as_slice()).collect();
        for (k, &i) in idx.iter().enumerate() {
            rs[k] = calibration.returns[i];
            ds[k] = calibration.died[i];
        }
        let v = cwpdis_refs(&sub, cfg.gamma)?;
        let c = return_mortality_curve(&rs, &ds, cfg.calibration_bins)?;
        draws.push(c.interpolate(v).0);
    }
    let (std, ci_low, ci_high) = if draws.is_empty() {
        (0.0, mortality, mortality)
    } else {
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        draws.sort_by(f64::total_cmp);
        let q = |p: f64| draws[((p * (draws.len() - 1) as f64).round()) as usize];
        (var.sqrt(), q(0.025), q(0.975))
    };
    Ok(MortalityEstimate { value, mortality, std, ci_low, ci_high, clamped })
}

/// Level differences span -3..=3.
pub const DIFF_BINS: [i32; 7] = [-3, -2, -1, 0, 1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationBin {
    pub difference: i32,
    pub count: usize,
    /// Mortality rate of the steps in the bin, or mean next-step biomarker
    /// deviation for biomarker curves. `None` when the bin is empty.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationCurve {
    pub component: Component,
    pub bins: Vec<DeviationBin>,
    /// The zero-difference bin has the lowest value among bins with at
    /// least `min_bin_count` steps.
    pub min_at_zero: bool,
    /// Count-weighted mean over nonzero differences minus the zero bin.
    pub contrast: f64,
}

fn finish_curve(component: Component, sums: [f64; 7], counts: [usize; 7], min_count: usize) -> DeviationCurve {
    let bins: Vec<DeviationBin> = DIFF_BINS
        .iter()
        .enumerate()
        .map(|(k, &d)| DeviationBin {
            difference: d,
            count: counts[k],
            value: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect();
    let zero = bins[3].value;
    let min_at_zero = match zero {
        Some(z) if counts[3] >= min_count => bins
            .iter()
            .filter(|b| b.difference != 0 && b.count >= min_count)
            .all(|b| b.value.unwrap() >= z),
        _ => false,
    };
    let off: usize = (0..7).filter(|&k| k != 3).map(|k| counts[k]).sum();
    let contrast = match zero {
        Some(z) if off > 0 => (0..7).filter(|&k| k != 3).map(|k| sums[k]).sum::<f64>() / off as f64 - z,
        _ => 0.0,
    };
    DeviationCurve { component, bins, min_at_zero, contrast }
}

/// Mortality per (policy level - logged level) bin, one curve per component.
/// `policy_actions[n][t]` is the policy's action at step `t` of episode `n`.
pub fn dosage_deviation_curves(
    episodes: &[Episode],
    policy_actions: &[Vec<usize>],
    min_bin_count: usize,
) -> [DeviationCurve; 3] {
    Component::ALL.map(|c| {
        let mut sums = [0.0; 7];
        let mut counts = [0usize; 7];
        for (e, acts) in episodes.iter().zip(policy_actions) {
            for (&logged, &chosen) in e.actions.iter().zip(acts) {
                let k = (level_of(chosen, c) as i32 - level_of(logged, c) as i32 + 3) as usize;
                counts[k] += 1;
                sums[k] += e.mortality as u8 as f64;
            }
        }
        finish_curve(c, sums, counts, min_bin_count)
    })
}

/// Mean next-window deviation of glucose (by calorie difference) and
/// phosphate (by protein difference). Terminal steps have no next window.
pub fn biomarker_deviation_curves(
    episodes: &[Episode],
    policy_actions: &[Vec<usize>],
    reward: &RewardConfig,
    min_bin_count: usize,
) -> [DeviationCurve; 2] {
    let curve = |c: Component, marker: &dyn Fn(&Episode, usize) -> f64| {
        let mut sums = [0.0; 7];
        let mut counts = [0usize; 7];
        for (e, acts) in episodes.iter().zip(policy_actions) {
            for t in 0..e.len().saturating_sub(1) {
                let k = (level_of(acts[t], c) as i32 - level_of(e.actions[t], c) as i32 + 3) as usize;
                counts[k] += 1;
                sums[k] += marker(e, t + 1);
            }
        }
        finish_curve(c, sums, counts, min_bin_count)
    };
    [
        curve(Component::Calories, &|e, t| deviation(e.vitals[t].glucose, reward.glucose_range)),
        curve(Component::Protein, &|e, t| deviation(e.vitals[t].phosphate, reward.phosphate_range)),
    ]
}

/// Concrete per-step actions for deviation analyses: the argmax for
/// deterministic rows, a seeded draw otherwise.
pub fn choose_actions(dists: &[Array2<f64>], deterministic: bool, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dists
        .iter()
        .map(|d| {
            d.rows()
                .into_iter()
                .map(|row| {
                    if deterministic {
                        crate::policy::argmax_rows(&row.to_owned().insert_axis(ndarray::Axis(0)))[0]
                    } else {
                        sample_action(row, &mut rng)
                    }
                })
                .collect()
        })
        .collect()
}

/// Plain mean discounted return of the logged trajectories.
pub fn mean_discounted_return(episodes: &[Episode], gamma: f64) -> f64 {
    episodes.iter().map(|e| e.discounted_return(gamma)).sum::<f64>() / episodes.len().max(1) as f64
}

/// Random subset of `k` of `n` indices, sorted; used for validation splits.
pub fn subset(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}
