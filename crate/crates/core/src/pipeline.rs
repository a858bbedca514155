//! File-based pipeline stages: synth, featurize, train-bc, train, eval, report.
//!
//! Every stage reads its inputs from and writes its outputs to the run's
//! output directory. Each artifact carries the hash of the resolved run
//! configuration so that `report` can refuse to mix artifacts from
//! different configurations.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{level_of, Component, QuantileThresholds, ACTION_LEVELS, N_ACTIONS};
use crate::cohort::{generate_cohort, SynthConfig};
use crate::data_model::{read_dataset, read_json, write_dataset, write_json, PatientRecord};
use crate::error::{Error, Result};
use crate::featurize::{build_manifest, build_transitions, read_episodes, write_episodes, Episode};
use crate::nn::{Checkpoint, Network};
use crate::ope::{
    biomarker_deviation_curves, choose_actions, dosage_deviation_curves, estimate_policy_mortality,
    floor_probabilities, logged_steps, mean_discounted_return, return_mortality_curve, smooth, subset,
    CalibrationCurve, CalibrationData, DeviationCurve, MortalityEstimate, OpeConfig,
};
use crate::policy::{episode_states, BcPolicy, GuidelineParams, Policy, PolicyKind, PolicySpec};
use crate::reward::RewardConfig;
use crate::training::{self, BcConfig, BcReport, GridRow, LogRow, TrainConfig, TransitionSet, Validation};

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const BC_CHECKPOINT: &str = "bc_checkpoint.json";
pub const BC_REPORT: &str = "bc_report.json";
pub const DEEPEN_CHECKPOINT: &str = "deepen_checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const GRID_FILE: &str = "grid_search.csv";
pub const OPE_REPORT: &str = "ope_report.json";
pub const CONFIG_ECHO: &str = "resolved_config.json";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizeConfig {
    pub split_seed: u64,
    /// Refit the dose cut-points to the training doses instead of using `thresholds`.
    pub refit_thresholds: bool,
    pub thresholds: QuantileThresholds,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self { split_seed: 1, refit_thresholds: false, thresholds: QuantileThresholds::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoliciesConfig {
    pub evaluate: Vec<PolicyKind>,
    pub guideline: GuidelineParams,
}

impl Default for PoliciesConfig {
    fn default() -> Self {
        Self { evaluate: PolicyKind::ALL.to_vec(), guideline: GuidelineParams::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSource {
    /// Mean learned Q-value of the logged actions along each trajectory.
    QValues,
    /// Observed discounted return of each trajectory.
    ObservedReturns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ope: OpeConfig,
    pub calibration_source: CalibrationSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ope: OpeConfig::default(), calibration_source: CalibrationSource::ObservedReturns }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, every section seed is derived from it.
    pub seed: Option<u64>,
    /// Not part of the configuration hash.
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub featurize: FeaturizeConfig,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub bc: BcConfig,
    pub policies: PoliciesConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            synth: SynthConfig::default(),
            featurize: FeaturizeConfig::default(),
            reward: RewardConfig::default(),
            train: TrainConfig::default(),
            bc: BcConfig::default(),
            policies: PoliciesConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Apply the global seed to every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            c.synth.seed = s;
            c.featurize.split_seed = s.wrapping_add(1);
            c.train.seed = s.wrapping_add(2);
            c.bc.seed = s.wrapping_add(3);
            c.eval.ope.seed = s.wrapping_add(4);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.featurize.thresholds.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        self.bc.validate()?;
        self.policies.guideline.validate()?;
        self.eval.ope.validate()?;
        if self.policies.evaluate.is_empty() {
            return Err(Error::Config("policies.evaluate is empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration without the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.out_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

/// Resolve, validate and prepare the output directory; echoes the config.
fn prepare(cfg: &RunConfig) -> Result<(RunConfig, String)> {
    let resolved = cfg.resolved();
    resolved.validate()?;
    std::fs::create_dir_all(&resolved.out_dir).map_err(|e| Error::io(&resolved.out_dir, e))?;
    let hash = cfg.hash();
    #[derive(Serialize)]
    struct Echo<'a> {
        config_hash: &'a str,
        config: &'a RunConfig,
    }
    let mut echo_cfg = resolved.clone();
    echo_cfg.out_dir = PathBuf::new();
    write_json(&resolved.path(CONFIG_ECHO), &Echo { config_hash: &hash, config: &echo_cfg })?;
    Ok((resolved, hash))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path))
    }
}

/// CSV text preceded by a `# config_hash=...` line.
fn write_csv<R: Serialize>(path: &Path, hash: &str, rows: &[R]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={hash}").unwrap();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn csv_hash(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .map(str::to_string)
        .ok_or_else(|| Error::Schema(format!("{}: missing config hash line", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub patients: usize,
    pub mortality: f64,
    pub mean_stay_hours: f64,
    pub windows: usize,
}

pub fn summarize(records: &[PatientRecord]) -> SynthSummary {
    let n = records.len().max(1) as f64;
    SynthSummary {
        patients: records.len(),
        mortality: records.iter().map(|r| r.mortality as f64).sum::<f64>() / n,
        mean_stay_hours: records.iter().map(|r| r.icu_stay_hours).sum::<f64>() / n,
        windows: records.iter().map(|r| r.windows.len()).sum(),
    }
}

pub fn run_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let (cfg, hash) = prepare(cfg)?;
    let records = generate_cohort(&cfg.synth)?;
    let manifest = build_manifest(&records, &cfg.featurize.thresholds, cfg.featurize.split_seed, &hash)?;
    write_dataset(&cfg.path(COHORT_FILE), &records, &manifest)?;
    Ok(summarize(&records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeSummary {
    pub episodes: usize,
    pub train_transitions: usize,
    pub test_transitions: usize,
    pub thresholds: QuantileThresholds,
}

pub fn run_featurize(cfg: &RunConfig) -> Result<FeaturizeSummary> {
    let (cfg, hash) = prepare(cfg)?;
    let (records, _) = read_dataset(&require(cfg.path(COHORT_FILE))?)?;
    let thresholds = if cfg.featurize.refit_thresholds {
        let probe = build_manifest(&records, &cfg.featurize.thresholds, cfg.featurize.split_seed, &hash)?;
        let (mut c, mut p, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for r in records.iter().filter(|r| !probe.is_test(&r.patient_id)) {
            for win in &r.windows {
                c.push(win.dose_administered.calories);
                p.push(win.dose_administered.protein);
                w.push(win.dose_administered.water);
            }
        }
        QuantileThresholds::fit(&c, &p, &w)?
    } else {
        cfg.featurize.thresholds.clone()
    };
    let manifest = build_manifest(&records, &thresholds, cfg.featurize.split_seed, &hash)?;
    let episodes = build_transitions(&records, &manifest, &cfg.reward)?;
    write_episodes(&cfg.path(EPISODES_FILE), &episodes, &manifest)?;
    Ok(FeaturizeSummary {
        episodes: episodes.len(),
        train_transitions: manifest.counts.train_transitions,
        test_transitions: manifest.counts.test_transitions,
        thresholds,
    })
}

fn load_episodes(cfg: &RunConfig) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let (episodes, _) = read_episodes(&require(cfg.path(EPISODES_FILE))?)?;
    Ok(episodes.into_iter().partition(|e| !e.test))
}

fn load_network(path: PathBuf) -> Result<Network> {
    Ok(Checkpoint::load(&require(path)?)?.network())
}

/// BC probabilities per episode, floored for use as the behavior policy.
fn behavior_probabilities(bc: &BcPolicy, episodes: &[Episode], floor: f64) -> Result<Vec<Array2<f64>>> {
    episodes
        .iter()
        .map(|e| {
            let mut p = bc.distributions(e)?;
            floor_probabilities(&mut p, floor);
            Ok(p)
        })
        .collect()
}

pub fn run_train_bc(cfg: &RunConfig) -> Result<BcReport> {
    let (cfg, hash) = prepare(cfg)?;
    let (train, test) = load_episodes(&cfg)?;
    let (net, report) = training::train_bc(
        &TransitionSet::from_episodes(&train),
        &cfg.bc,
        Some(&TransitionSet::from_episodes(&test)),
    )?;
    let echo = serde_json::to_value(&cfg.bc)?;
    Checkpoint::new(&net, None, None, cfg.bc.steps as u64, echo, &hash).save(&cfg.path(BC_CHECKPOINT))?;
    #[derive(Serialize)]
    struct Out<'a> {
        config_hash: &'a str,
        #[serde(flatten)]
        report: &'a BcReport,
    }
    write_json(&cfg.path(BC_REPORT), &Out { config_hash: &hash, report: &report })?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub alpha: f64,
    pub gamma: f64,
    pub best_step: usize,
    pub best_validation_cwpdis: Option<f64>,
    pub fit_transitions: usize,
    pub validation_patients: usize,
    pub grid: Option<Vec<GridRow>>,
}

pub fn run_train(cfg: &RunConfig, grid: bool) -> Result<TrainSummary> {
    let (cfg, hash) = prepare(cfg)?;
    let (train, _) = load_episodes(&cfg)?;
    if train.is_empty() {
        return Err(Error::Empty("training split has no episodes".into()));
    }
    let bc = BcPolicy::new(load_network(cfg.path(BC_CHECKPOINT))?)?;

    let n_val = (train.len() as f64 * cfg.train.validation_fraction).round() as usize;
    let val_idx = subset(train.len(), n_val, cfg.train.seed ^ 0x7a11);
    let mut is_val = vec![false; train.len()];
    for &i in &val_idx {
        is_val[i] = true;
    }
    let (mut validation, mut fit) = (Vec::new(), Vec::new());
    for (i, e) in train.into_iter().enumerate() {
        if is_val[i] {
            validation.push(e);
        } else {
            fit.push(e);
        }
    }
    let data = TransitionSet::from_episodes(&fit);
    let behavior = behavior_probabilities(&bc, &validation, cfg.eval.ope.behavior_floor)?;
    let val = (!validation.is_empty()).then(|| Validation {
        episodes: &validation,
        behavior: &behavior,
        gamma: cfg.eval.ope.gamma,
        kappa: cfg.eval.ope.kappa,
    });

    let mut train_cfg = cfg.train.clone();
    let grid_rows = match (grid, &val) {
        (true, Some(v)) => {
            let rows = training::grid_search(&data, &train_cfg, v)?;
            write_csv(&cfg.path(GRID_FILE), &hash, &rows)?;
            train_cfg.alpha = rows[0].alpha;
            train_cfg.gamma = rows[0].gamma;
            Some(rows)
        }
        (true, None) => return Err(Error::Config("grid search needs a validation split".into())),
        _ => None,
    };

    let out = training::train(&data, &train_cfg, val.as_ref(), Some(&cfg.out_dir))?;
    let echo = serde_json::to_value(&train_cfg)?;
    Checkpoint::new(&out.best, None, None, out.best_step as u64, echo, &hash).save(&cfg.path(DEEPEN_CHECKPOINT))?;
    write_csv(&cfg.path(TRAIN_LOG), &hash, &log_rows(&out.log))?;
    Ok(TrainSummary {
        alpha: train_cfg.alpha,
        gamma: train_cfg.gamma,
        best_step: out.best_step,
        best_validation_cwpdis: out.best_value,
        fit_transitions: data.len(),
        validation_patients: validation.len(),
        grid: grid_rows,
    })
}

#[derive(Serialize)]
struct LogCsvRow {
    step: usize,
    td_loss: f64,
    cql: f64,
    mean_q: f64,
    validation_cwpdis: Option<f64>,
}

fn log_rows(log: &[LogRow]) -> Vec<LogCsvRow> {
    log.iter()
        .map(|r| LogCsvRow {
            step: r.step,
            td_loss: r.td_loss,
            cql: r.cql,
            mean_q: r.mean_q,
            validation_cwpdis: r.validation_cwpdis,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub policy: PolicyKind,
    pub cwpdis: f64,
    pub mortality: MortalityEstimate,
    /// Observed values, reported for the clinician.
    pub empirical_mean_return: Option<f64>,
    pub empirical_mortality: Option<f64>,
    pub dosage_curves: Vec<DeviationCurve>,
    pub biomarker_curves: Vec<DeviationCurve>,
    /// Step counts per component (calories, protein, water) and level 1..=4.
    pub level_counts: [[usize; 4]; 3],
    /// Step counts per action id.
    pub action_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub config_hash: String,
    pub test_patients: usize,
    pub test_transitions: usize,
    pub gamma: f64,
    pub bootstrap: usize,
    pub seed: u64,
    pub calibration_source: CalibrationSource,
    pub calibration: CalibrationCurve,
    pub policies: Vec<PolicyResult>,
}

impl OpeReport {
    pub fn policy(&self, kind: PolicyKind) -> Option<&PolicyResult> {
        self.policies.iter().find(|p| p.policy == kind)
    }
}

pub fn run_eval(cfg: &RunConfig) -> Result<OpeReport> {
    let (cfg, hash) = prepare(cfg)?;
    let (_, test) = load_episodes(&cfg)?;
    if test.is_empty() {
        return Err(Error::Empty("test split has no episodes".into()));
    }
    let ope = &cfg.eval.ope;
    let thresholds = read_episodes_manifest_thresholds(&cfg)?;
    let bc_path = require(cfg.path(BC_CHECKPOINT))?;
    let bc = BcPolicy::new(load_network(bc_path.clone())?)?;
    let behavior = behavior_probabilities(&bc, &test, ope.behavior_floor)?;

    let deepen_path = cfg.path(DEEPEN_CHECKPOINT);
    let needs_q = cfg.eval.calibration_source == CalibrationSource::QValues;
    let q_net = if needs_q || cfg.policies.evaluate.contains(&PolicyKind::Deepen) {
        Some(load_network(deepen_path.clone())?)
    } else {
        None
    };

    let returns: Vec<f64> = match cfg.eval.calibration_source {
        CalibrationSource::QValues => {
            let net = q_net.as_ref().unwrap();
            test.iter()
                .map(|e| {
                    let q = net.forward(episode_states(e).view())?;
                    Ok(e.actions.iter().enumerate().map(|(t, &a)| q[[t, a]]).sum::<f64>() / e.len() as f64)
                })
                .collect::<Result<_>>()?
        }
        CalibrationSource::ObservedReturns => test.iter().map(|e| e.discounted_return(ope.gamma)).collect(),
    };
    let died: Vec<bool> = test.iter().map(|e| e.mortality).collect();
    let calibration = return_mortality_curve(&returns, &died, ope.calibration_bins)?;
    let cal_data = CalibrationData { returns: &returns, died: &died };

    let mut results = Vec::new();
    for (k, &kind) in cfg.policies.evaluate.iter().enumerate() {
        let spec = PolicySpec {
            kind,
            checkpoint: match kind {
                PolicyKind::Bc => Some(bc_path.clone()),
                PolicyKind::Deepen => Some(deepen_path.clone()),
                _ => None,
            },
            guideline: cfg.policies.guideline.clone(),
        };
        let policy = spec.build(&thresholds)?;
        let dists: Vec<Array2<f64>> = test.iter().map(|e| policy.distributions(e)).collect::<Result<_>>()?;

        // evaluation-policy probabilities for importance weights
        let eval_probs: Vec<Array2<f64>> = match kind {
            PolicyKind::Clinician => behavior.clone(),
            _ if policy.is_deterministic() => dists
                .iter()
                .map(|d| {
                    let mut d = d.clone();
                    smooth(&mut d, ope.kappa);
                    d
                })
                .collect(),
            _ => dists.clone(),
        };
        let steps = logged_steps(&test, &eval_probs, &behavior)?;
        let mortality = estimate_policy_mortality(&steps, &cal_data, &OpeConfig { seed: ope.seed, ..ope.clone() })?;

        let actions = choose_actions(&dists, policy.is_deterministic(), ope.seed.wrapping_add(k as u64 + 1));
        let mut level_counts = [[0usize; 4]; 3];
        let mut action_counts = vec![0usize; N_ACTIONS];
        for &a in actions.iter().flatten() {
            action_counts[a] += 1;
            for (c, comp) in Component::ALL.iter().enumerate() {
                level_counts[c][level_of(a, *comp) as usize - 1] += 1;
            }
        }
        let clinician = kind == PolicyKind::Clinician;
        results.push(PolicyResult {
            policy: kind,
            cwpdis: mortality.value,
            empirical_mean_return: clinician.then(|| mean_discounted_return(&test, ope.gamma)),
            empirical_mortality: clinician.then(|| died.iter().filter(|&&d| d).count() as f64 / died.len() as f64),
            mortality,
            dosage_curves: dosage_deviation_curves(&test, &actions, ope.min_bin_count).to_vec(),
            biomarker_curves: biomarker_deviation_curves(&test, &actions, &cfg.reward, ope.min_bin_count).to_vec(),
            level_counts,
            action_counts,
        });
        write_action_dump(&cfg.path(&format!("actions_{}.csv", kind.name())), &hash, &test, &actions)?;
    }

    let report = OpeReport {
        config_hash: hash,
        test_patients: test.len(),
        test_transitions: test.iter().map(Episode::len).sum(),
        gamma: ope.gamma,
        bootstrap: ope.bootstrap,
        seed: ope.seed,
        calibration_source: cfg.eval.calibration_source,
        calibration,
        policies: results,
    };
    write_json(&cfg.path(OPE_REPORT), &report)?;
    Ok(report)
}

fn read_episodes_manifest_thresholds(cfg: &RunConfig) -> Result<QuantileThresholds> {
    let m: crate::data_model::DatasetManifest =
        read_json(&require(crate::data_model::manifest_path(&cfg.path(EPISODES_FILE)))?)?;
    Ok(m.action_thresholds)
}

#[derive(Serialize)]
struct ActionRow<'a> {
    patient_id: &'a str,
    t: usize,
    action: usize,
    calories: u8,
    protein: u8,
    water: u8,
    logged_action: usize,
}

fn write_action_dump(path: &Path, hash: &str, episodes: &[Episode], actions: &[Vec<usize>]) -> Result<()> {
    let mut rows = Vec::new();
    for (e, acts) in episodes.iter().zip(actions) {
        for (t, &a) in acts.iter().enumerate() {
            let (calories, protein, water) = ACTION_LEVELS[a];
            rows.push(ActionRow { patient_id: &e.patient_id, t, action: a, calories, protein, water, logged_action: e.actions[t] });
        }
    }
    write_csv(path, hash, &rows)
}

/// Hashes embedded in the artifacts `report` reads.
fn artifact_hashes(cfg: &RunConfig, report: &OpeReport) -> Result<Vec<(String, String)>> {
    #[derive(Deserialize)]
    struct Header {
        config_hash: String,
    }
    let mut out = vec![(OPE_REPORT.to_string(), report.config_hash.clone())];
    let episodes = require(cfg.path(EPISODES_FILE))?;
    let first = std::fs::read_to_string(&episodes).map_err(|e| Error::io(&episodes, e))?;
    let header: Header = serde_json::from_str(first.lines().next().unwrap_or("{}"))?;
    out.push((EPISODES_FILE.to_string(), header.config_hash));
    for name in [BC_CHECKPOINT, DEEPEN_CHECKPOINT] {
        let path = cfg.path(name);
        if path.exists() {
            out.push((name.to_string(), Checkpoint::load(&path)?.config_hash));
        }
    }
    let log = cfg.path(TRAIN_LOG);
    if log.exists() {
        out.push((TRAIN_LOG.to_string(), csv_hash(&log)?));
    }
    Ok(out)
}

#[derive(Serialize)]
struct PolicyRow {
    policy: &'static str,
    cwpdis: f64,
    estimated_mortality: f64,
    mortality_std: f64,
    ci_low: f64,
    ci_high: f64,
    clamped: bool,
    empirical_mortality: Option<f64>,
    empirical_mean_return: Option<f64>,
}

#[derive(Serialize)]
struct CalibrationRow {
    bin: usize,
    lo: f64,
    hi: f64,
    center: f64,
    count: usize,
    deaths: usize,
    mortality: f64,
    ci_low: f64,
    ci_high: f64,
}

#[derive(Serialize)]
struct DeviationRow {
    policy: &'static str,
    component: &'static str,
    difference: i32,
    count: usize,
    value: Option<f64>,
}

#[derive(Serialize)]
struct LevelRow {
    policy: &'static str,
    component: &'static str,
    level: usize,
    count: usize,
    fraction: f64,
}

/// Render the evaluation into flat tables plus a markdown summary.
pub fn run_report(cfg: &RunConfig, force: bool) -> Result<Vec<PathBuf>> {
    let (cfg, hash) = prepare(cfg)?;
    let report: OpeReport = read_json(&require(cfg.path(OPE_REPORT))?)?;
    let mut hashes = artifact_hashes(&cfg, &report)?;
    hashes.push(("current config".to_string(), hash.clone()));
    let distinct: std::collections::BTreeSet<&str> = hashes.iter().map(|(_, h)| h.as_str()).collect();
    if distinct.len() > 1 && !force {
        let listing: Vec<String> = hashes.iter().map(|(f, h)| format!("{f}={}", &h[..h.len().min(12)])).collect();
        return Err(Error::Config(format!(
            "artifacts come from different configurations ({}); rerun the stages or pass --force",
            listing.join(", ")
        )));
    }
    let dir = cfg.out_dir.join(REPORT_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let h = &report.config_hash;
    let mut written = Vec::new();

    let policy_rows: Vec<PolicyRow> = report
        .policies
        .iter()
        .map(|p| PolicyRow {
            policy: p.policy.name(),
            cwpdis: p.cwpdis,
            estimated_mortality: p.mortality.mortality,
            mortality_std: p.mortality.std,
            ci_low: p.mortality.ci_low,
            ci_high: p.mortality.ci_high,
            clamped: p.mortality.clamped,
            empirical_mortality: p.empirical_mortality,
            empirical_mean_return: p.empirical_mean_return,
        })
        .collect();
    let path = dir.join("policy_comparison.csv");
    write_csv(&path, h, &policy_rows)?;
    written.push(path);

    let cal_rows: Vec<CalibrationRow> = report
        .calibration
        .bins
        .iter()
        .enumerate()
        .map(|(i, b)| CalibrationRow {
            bin: i + 1,
            lo: b.lo,
            hi: b.hi,
            center: b.center,
            count: b.count,
            deaths: b.deaths,
            mortality: b.mortality,
            ci_low: b.ci_low,
            ci_high: b.ci_high,
        })
        .collect();
    let path = dir.join("return_mortality.csv");
    write_csv(&path, h, &cal_rows)?;
    written.push(path);

    let deviation_rows = |curves: &dyn Fn(&PolicyResult) -> &Vec<DeviationCurve>, rename: &dyn Fn(Component) -> &'static str| {
        let mut rows = Vec::new();
        for p in &report.policies {
            for c in curves(p) {
                for b in &c.bins {
                    rows.push(DeviationRow {
                        policy: p.policy.name(),
                        component: rename(c.component),
                        difference: b.difference,
                        count: b.count,
                        value: b.value,
                    });
                }
            }
        }
        rows
    };
    let path = dir.join("dosage_deviation_mortality.csv");
    write_csv(&path, h, &deviation_rows(&|p| &p.dosage_curves, &|c| c.name()))?;
    written.push(path);
    let path = dir.join("biomarker_deviation.csv");
    let marker = |c: Component| match c {
        Component::Calories => "calories_glucose",
        Component::Protein => "protein_phosphate",
        Component::Water => "water",
    };
    write_csv(&path, h, &deviation_rows(&|p| &p.biomarker_curves, &marker))?;
    written.push(path);

    let mut level_rows = Vec::new();
    for p in &report.policies {
        for (c, comp) in Component::ALL.iter().enumerate() {
            let total: usize = p.level_counts[c].iter().sum();
            for l in 0..4 {
                level_rows.push(LevelRow {
                    policy: p.policy.name(),
                    component: comp.name(),
                    level: l + 1,
                    count: p.level_counts[c][l],
                    fraction: p.level_counts[c][l] as f64 / total.max(1) as f64,
                });
            }
        }
    }
    let path = dir.join("action_distribution.csv");
    write_csv(&path, h, &level_rows)?;
    written.push(path);

    let path = dir.join("summary.md");
    std::fs::write(&path, markdown_summary(&report, &hash)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

fn markdown_summary(report: &OpeReport, current_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Policy evaluation\n");
    let _ = writeln!(s, "config hash `{}`", report.config_hash);
    if report.config_hash != current_hash {
        let _ = writeln!(s, "(current configuration hash `{current_hash}` differs)");
    }
    let _ = writeln!(
        s,
        "\n{} test patients, {} transitions, gamma {}, {} bootstrap resamples.\n",
        report.test_patients, report.test_transitions, report.gamma, report.bootstrap
    );
    let _ = writeln!(s, "| policy | CWPDIS | est. mortality | 95% CI |");
    let _ = writeln!(s, "|---|---|---|---|");
    for p in &report.policies {
        let _ = writeln!(
            s,
            "| {} | {:.3} | {:.1}% ± {:.2} | {:.1}-{:.1}%{} |",
            p.policy.name(),
            p.cwpdis,
            100.0 * p.mortality.mortality,
            100.0 * p.mortality.std,
            100.0 * p.mortality.ci_low,
            100.0 * p.mortality.ci_high,
            if p.mortality.clamped { " (outside calibrated range)" } else { "" }
        );
    }
    if let Some(c) = report.policy(PolicyKind::Clinician) {
        let _ = writeln!(
            s,
            "\nClinician observed mortality {:.1}%, mean discounted return {:.3}.",
            100.0 * c.empirical_mortality.unwrap_or(f64::NAN),
            c.empirical_mean_return.unwrap_or(f64::NAN)
        );
    }
    let _ = writeln!(
        s,
        "\nReturn-mortality Spearman rho {:.3} (p = {:.2e}).\n",
        report.calibration.spearman_rho, report.calibration.spearman_p
    );
    let _ = writeln!(s, "| policy | component | minimum at zero difference | contrast |");
    let _ = writeln!(s, "|---|---|---|---|");
    for p in &report.policies {
        for c in &p.dosage_curves {
            let _ = writeln!(s, "| {} | {} | {} | {:.4} |", p.policy.name(), c.component.name(), c.min_at_zero, c.contrast);
        }
    }
    s
}

/// Run every stage in order.
pub fn run_all(cfg: &RunConfig, grid: bool) -> Result<OpeReport> {
    run_synth(cfg)?;
    run_featurize(cfg)?;
    run_train_bc(cfg)?;
    run_train(cfg, grid)?;
    let report = run_eval(cfg)?;
    run_report(cfg, false)?;
    Ok(report)
}
