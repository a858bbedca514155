//! Offline training: dueling double DQN with a conservative penalty, and the
//! behavior-cloning classifier.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::N_ACTIONS;
use crate::data_model::{write_json, STATE_DIM};
use crate::error::{Error, Result};
use crate::featurize::Episode;
use crate::nn::{softmax_rows, Adam, Architecture, Checkpoint, DuelingQNet, Network};
use crate::ope::{cwpdis, logged_steps, smooth};
use crate::policy::{argmax_rows, episode_states};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CqlForm {
    /// `mean_a Q(s,a) - Q(s,a_data)`
    Mean,
    /// `log sum_a exp Q(s,a) - Q(s,a_data)`
    LogSumExp,
}

impl CqlForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(CqlForm::Mean),
            "log_sum_exp" | "logsumexp" => Ok(CqlForm::LogSumExp),
            _ => Err(Error::Config(format!("unknown cql form `{s}` (mean | log_sum_exp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub target_sync: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub cql_form: CqlForm,
    pub hidden: Vec<usize>,
    /// Share of training patients held out for model selection.
    pub validation_fraction: f64,
    pub grid_alpha: Vec<f64>,
    pub grid_gamma: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.99,
            lr: 1e-4,
            batch_size: 500,
            steps: 50_000,
            target_sync: 1000,
            eval_every: 1000,
            seed: 0,
            cql_form: CqlForm::Mean,
            hidden: vec![256, 128, 64],
            validation_fraction: 0.1,
            grid_alpha: vec![0.01, 0.1, 0.5, 1.0],
            grid_gamma: vec![0.75, 0.9, 0.95, 0.99],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("train.gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("train.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.eval_every == 0 {
            return Err(Error::Config("train.batch_size, target_sync and eval_every must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("train.hidden needs at least one nonzero width".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("train.validation_fraction must be in [0, 1)".into()));
        }
        if self.grid_gamma.iter().any(|g| !(*g > 0.0 && *g < 1.0)) || self.grid_alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("train.grid_* values out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 500, steps: 10_000, seed: 0, hidden: vec![256, 128, 64] }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("bc: lr, batch_size and hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Flattened transitions. The next state of row `i` is row `next[i]` of the
/// same matrix; `None` marks a terminal step.
#[derive(Debug, Clone)]
pub struct TransitionSet {
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next: Vec<Option<usize>>,
}

impl TransitionSet {
    pub fn from_episodes<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Self {
        let mut rows: Vec<f64> = Vec::new();
        let (mut actions, mut rewards, mut next) = (Vec::new(), Vec::new(), Vec::new());
        let mut dim = STATE_DIM;
        for e in episodes {
            let base = actions.len();
            for t in 0..e.len() {
                dim = e.states[t].len();
                rows.extend_from_slice(&e.states[t]);
                actions.push(e.actions[t]);
                rewards.push(e.rewards[t]);
                next.push((t + 1 < e.len()).then_some(base + t + 1));
            }
        }
        let n = actions.len();
        Self { states: Array2::from_shape_vec((n, dim), rows).unwrap(), actions, rewards, next }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.dim();
        let mut states = Array2::zeros((indices.len(), d));
        let mut next_states = Array2::zeros((indices.len(), d));
        let mut terminal = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            states.row_mut(k).assign(&self.states.row(i));
            match self.next[i] {
                Some(j) => {
                    next_states.row_mut(k).assign(&self.states.row(j));
                    terminal.push(false);
                }
                None => terminal.push(true),
            }
        }
        Batch {
            states,
            actions: indices.iter().map(|&i| self.actions[i]).collect(),
            rewards: indices.iter().map(|&i| self.rewards[i]).collect(),
            next_states,
            terminal,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Zero rows at terminal steps.
    pub next_states: Array2<f64>,
    pub terminal: Vec<bool>,
}

/// `y = r` at terminal steps, else `r + gamma * Q_target(s', argmax_a Q_online(s', a))`.
pub fn double_q_target(batch: &Batch, online: &Network, target: &Network, gamma: f64) -> Result<Vec<f64>> {
    let q_online = online.forward(batch.next_states.view())?;
    let q_target = target.forward(batch.next_states.view())?;
    let best = argmax_rows(&q_online);
    Ok((0..batch.rewards.len())
        .map(|i| {
            if batch.terminal[i] {
                batch.rewards[i]
            } else {
                batch.rewards[i] + gamma * q_target[[i, best[i]]]
            }
        })
        .collect())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|q| (q - max).exp()).sum::<f64>().ln()
}

pub fn cql_penalty(q_row: &[f64], a_data: usize, form: CqlForm) -> f64 {
    let push_down = match form {
        CqlForm::Mean => q_row.iter().sum::<f64>() / q_row.len() as f64,
        CqlForm::LogSumExp => log_sum_exp(q_row),
    };
    push_down - q_row[a_data]
}

/// Gradient of `cql_penalty` with respect to the Q row.
fn cql_gradient(q_row: &[f64], a_data: usize, form: CqlForm, out: &mut [f64]) {
    match form {
        CqlForm::Mean => out.fill(1.0 / q_row.len() as f64),
        CqlForm::LogSumExp => {
            let lse = log_sum_exp(q_row);
            for (o, q) in out.iter_mut().zip(q_row) {
                *o = (q - lse).exp();
            }
        }
    }
    out[a_data] -= 1.0;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub loss: f64,
    pub td_loss: f64,
    pub cql: f64,
    pub mean_q: f64,
}

/// Loss gradient on the online Q matrix and the loss terms, without updating anything.
pub fn loss_and_gradient(
    q: &Array2<f64>,
    batch: &Batch,
    targets: &[f64],
    alpha: f64,
    form: CqlForm,
) -> (StepDiagnostics, Array2<f64>) {
    let b = batch.actions.len() as f64;
    let mut grad = Array2::zeros(q.raw_dim());
    let (mut td, mut cql) = (0.0, 0.0);
    let mut g = vec![0.0; q.ncols()];
    for (i, row) in q.rows().into_iter().enumerate() {
        let a = batch.actions[i];
        let row = row.as_slice().unwrap();
        let err = row[a] - targets[i];
        td += err * err;
        cql += cql_penalty(row, a, form);
        cql_gradient(row, a, form, &mut g);
        for (j, gj) in g.iter().enumerate() {
            grad[[i, j]] = alpha * gj / b;
        }
        grad[[i, a]] += 2.0 * err / b;
    }
    let (td, cql) = (td / b, cql / b);
    let diag = StepDiagnostics { loss: td + alpha * cql, td_loss: td, cql, mean_q: q.mean().unwrap_or(0.0) };
    (diag, grad)
}

/// One optimizer step on `mean (Q(s,a) - y)^2 + alpha * mean penalty`.
pub fn train_step(
    batch: &Batch,
    nets: &mut DuelingQNet,
    opt: &mut Adam,
    cfg: &TrainConfig,
) -> Result<StepDiagnostics> {
    let targets = double_q_target(batch, &nets.online, &nets.target, cfg.gamma)?;
    let (q, cache) = nets.online.forward_cached(batch.states.view())?;
    let (diag, grad) = loss_and_gradient(&q, batch, &targets, cfg.alpha, cfg.cql_form);
    if !diag.loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", diag.loss)));
    }
    let grads = nets.online.backward(&cache, grad.view());
    opt.step(&mut nets.online, &grads)?;
    Ok(diag)
}

/// Held-out episodes with floored behavior probabilities for model selection.
pub struct Validation<'a> {
    pub episodes: &'a [Episode],
    pub behavior: &'a [Array2<f64>],
    pub gamma: f64,
    pub kappa: f64,
}

/// CWPDIS of the smoothed greedy policy of `net` on `v`.
pub fn greedy_cwpdis(net: &Network, v: &Validation) -> Result<f64> {
    let eval = v
        .episodes
        .iter()
        .map(|e| {
            let actions = argmax_rows(&net.forward(episode_states(e).view())?);
            let mut p = Array2::zeros((e.len(), N_ACTIONS));
            for (t, a) in actions.into_iter().enumerate() {
                p[[t, a]] = 1.0;
            }
            smooth(&mut p, v.kappa);
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    cwpdis(&logged_steps(v.episodes, &eval, v.behavior)?, v.gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Means over the steps since the previous row.
    pub td_loss: f64,
    pub cql: f64,
    pub mean_q: f64,
    pub validation_cwpdis: Option<f64>,
}

pub struct TrainOutcome {
    /// Selected network: best validation CWPDIS, or the last one without validation.
    pub best: Network,
    pub best_step: usize,
    pub best_value: Option<f64>,
    pub nets: DuelingQNet,
    pub optimizer: Adam,
    pub log: Vec<LogRow>,
}

#[derive(Debug, Serialize)]
struct FailedBatch<'a> {
    step: usize,
    message: String,
    indices: &'a [usize],
}

pub fn train(
    data: &TransitionSet,
    cfg: &TrainConfig,
    validation: Option<&Validation>,
    failure_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training split has no transitions".into()));
    }
    let arch = Architecture::dueling(data.dim(), &cfg.hidden, N_ACTIONS);
    let mut nets = DuelingQNet::new(arch, cfg.seed);
    let mut opt = Adam::new(nets.online.params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let batch_size = cfg.batch_size.min(data.len());
    let mut indices = vec![0usize; batch_size];

    let mut log = Vec::new();
    let mut best = (nets.online.clone(), 0usize, None::<f64>);
    let (mut td_acc, mut cql_acc, mut q_acc, mut n_acc) = (0.0, 0.0, 0.0, 0usize);

    for step in 1..=cfg.steps {
        for i in indices.iter_mut() {
            *i = rng.gen_range(0..data.len());
        }
        let batch = data.batch(&indices);
        let diag = match train_step(&batch, &mut nets, &mut opt, cfg) {
            Ok(d) => d,
            Err(Error::Numerical(msg)) => {
                let mut msg = format!("step {step}: {msg}");
                if let Some(dir) = failure_dir {
                    let record = FailedBatch { step, message: msg.clone(), indices: &indices };
                    write_json(&dir.join("failed_batch.json"), &record)?;
                    let ck = Checkpoint::new(
                        &nets.online,
                        Some(&nets.target),
                        Some(&opt),
                        step as u64,
                        serde_json::to_value(cfg).unwrap_or_default(),
                        "",
                    );
                    ck.save(&dir.join("failed_checkpoint.json"))?;
                    msg.push_str(&format!("; batch indices written to {}", dir.join("failed_batch.json").display()));
                }
                return Err(Error::Numerical(msg));
            }
            Err(e) => return Err(e),
        };
        td_acc += diag.td_loss;
        cql_acc += diag.cql;
        q_acc += diag.mean_q;
        n_acc += 1;
        if step % cfg.target_sync == 0 {
            nets.sync_target();
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let value = validation.map(|v| greedy_cwpdis(&nets.online, v)).transpose()?;
            let n = n_acc as f64;
            let row = LogRow { step, td_loss: td_acc / n, cql: cql_acc / n, mean_q: q_acc / n, validation_cwpdis: value };
            log::info!(
                "step {step}: td {:.4} cql {:.4} mean Q {:.3} validation {:?}",
                row.td_loss,
                row.cql,
                row.mean_q,
                value
            );
            log.push(row);
            (td_acc, cql_acc, q_acc, n_acc) = (0.0, 0.0, 0.0, 0);
            let better = match (value, best.2) {
                (Some(v), Some(b)) => v > b,
                (Some(_), None) => true,
                (None, _) => true,
            };
            if better {
                best = (nets.online.clone(), step, value);
            }
        }
    }
    Ok(TrainOutcome { best: best.0, best_step: best.1, best_value: best.2, nets, optimizer: opt, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rank: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub validation_cwpdis: f64,
    pub best_step: usize,
}

/// Train every `(alpha, gamma)` pair and rank by validation CWPDIS.
pub fn grid_search(data: &TransitionSet, cfg: &TrainConfig, validation: &Validation) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &alpha in &cfg.grid_alpha {
        for &gamma in &cfg.grid_gamma {
            let run = TrainConfig { alpha, gamma, ..cfg.clone() };
            let out = train(data, &run, Some(validation), None)?;
            rows.push(GridRow {
                rank: 0,
                alpha,
                gamma,
                validation_cwpdis: out.best_value.unwrap_or(f64::NEG_INFINITY),
                best_step: out.best_step,
            });
        }
    }
    rows.sort_by(|a, b| b.validation_cwpdis.total_cmp(&a.validation_cwpdis));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub train_loss: Vec<(usize, f64)>,
    pub test_accuracy: Option<f64>,
    /// Mean log-probability of the true action, per action id; `None` where
    /// the class does not occur in the test split.
    pub per_class_log_likelihood: Vec<Option<f64>>,
}

/// Cross-entropy gradient on the logits and the mean loss.
fn cross_entropy(logits: &Array2<f64>, actions: &[usize]) -> (f64, Array2<f64>) {
    let b = actions.len() as f64;
    let mut p = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &a) in actions.iter().enumerate() {
        loss -= p[[i, a]].max(f64::MIN_POSITIVE).ln();
        p[[i, a]] -= 1.0;
    }
    p /= b;
    (loss / b, p)
}

pub fn bc_evaluate(net: &Network, states: ArrayView2<f64>, actions: &[usize]) -> Result<(f64, Vec<Option<f64>>)> {
    let p = softmax_rows(&net.forward(states)?);
    let predicted = argmax_rows(&p);
    let correct = predicted.iter().zip(actions).filter(|(p, a)| p == a).count();
    let mut sums = vec![0.0; N_ACTIONS];
    let mut counts = vec![0usize; N_ACTIONS];
    for (i, &a) in actions.iter().enumerate() {
        sums[a] += p[[i, a]].ln();
        counts[a] += 1;
    }
    let per_class = sums.iter().zip(&counts).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect();
    Ok((correct as f64 / actions.len().max(1) as f64, per_class))
}

pub fn train_bc(data: &TransitionSet, cfg: &BcConfig, test: Option<&TransitionSet>) -> Result<(Network, BcReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training split has no transitions".into()));
    }
    let mut net = Network::new(Architecture::logits(data.dim(), &cfg.hidden, N_ACTIONS), cfg.seed);
    let mut opt = Adam::new(net.params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xbc);
    let batch_size = cfg.batch_size.min(data.len());
    let mut indices = vec![0usize; batch_size];
    let mut train_loss = Vec::new();
    let mut acc = 0.0;
    let every = (cfg.steps / 20).max(1);
    for step in 1..=cfg.steps {
        for i in indices.iter_mut() {
            *i = rng.gen_range(0..data.len());
        }
        let states = data.states.select(Axis(0), &indices);
        let actions: Vec<usize> = indices.iter().map(|&i| data.actions[i]).collect();
        let (logits, cache) = net.forward_cached(states.view())?;
        let (loss, grad) = cross_entropy(&logits, &actions);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("behavior cloning step {step}: non-finite loss")));
        }
        let grads = net.backward(&cache, grad.view());
        opt.step(&mut net, &grads)?;
        acc += loss;
        if step % every == 0 || step == cfg.steps {
            let n = (step - 1) % every + 1;
            train_loss.push((step, acc / n as f64));
            acc = 0.0;
        }
    }
    let (test_accuracy, per_class_log_likelihood) = match test {
        Some(t) if !t.is_empty() => {
            let (a, pc) = bc_evaluate(&net, t.states.view(), &t.actions)?;
            (Some(a), pc)
        }
        _ => (None, vec![None; N_ACTIONS]),
    };
    Ok((net, BcReport { train_loss, test_accuracy, per_class_log_likelihood }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn batch_of(states: Array2<f64>, actions: Vec<usize>, rewards: Vec<f64>, next: Array2<f64>, terminal: Vec<bool>) -> Batch {
        Batch { states, actions, rewards, next_states: next, terminal }
    }

    /// Network whose Q row is the advantage-bias vector regardless of input.
    fn constant_q(q: &[f64]) -> Network {
        let mut net = Network::zeros(Architecture::dueling(2, &[2, 2, 2], q.len()));
        let a = net.layer("advantage").unwrap();
        net.params[a.bias_range()].copy_from_slice(q);
        let v = net.layer("value").unwrap();
        net.params[v.bias_range().start] = q.iter().sum::<f64>() / q.len() as f64;
        net
    }

    #[test]
    fn terminal_target_is_reward() {
        let net = constant_q(&[3.0, 7.0]);
        let b = batch_of(Array2::zeros((1, 2)), vec![0], vec![-15.0], Array2::zeros((1, 2)), vec![true]);
        assert_eq!(double_q_target(&b, &net, &net, 0.99).unwrap(), vec![-15.0]);
    }

    #[test]
    fn double_q_decouples_selection_and_evaluation() {
        // online prefers action 1, target values action 1 at 0.5
        let online = constant_q(&[0.0, 2.0]);
        let target = constant_q(&[9.0, 0.5]);
        let b = batch_of(Array2::zeros((1, 2)), vec![0], vec![1.0], Array2::ones((1, 2)), vec![false]);
        let y = double_q_target(&b, &online, &target, 0.99).unwrap();
        assert_abs_diff_eq!(y[0], 1.495, epsilon = 1e-9);
        // equal nets reduce to the max target
        let y = double_q_target(&b, &target, &target, 0.99).unwrap();
        assert_abs_diff_eq!(y[0], 1.0 + 0.99 * 9.0, epsilon = 1e-9);
    }

    #[test]
    fn cql_penalty_hand_cases() {
        assert_abs_diff_eq!(cql_penalty(&[1.0, 2.0, 3.0], 2, CqlForm::Mean), -1.0, epsilon = 1e-12);
        assert_eq!(cql_penalty(&[4.0; 5], 3, CqlForm::Mean), 0.0);
        assert_abs_diff_eq!(cql_penalty(&[0.0, 0.0], 0, CqlForm::LogSumExp), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cql_gradient_matches_finite_differences() {
        let q = [0.3, -1.2, 2.0, 0.7];
        for form in [CqlForm::Mean, CqlForm::LogSumExp] {
            let mut g = [0.0; 4];
            cql_gradient(&q, 1, form, &mut g);
            for j in 0..4 {
                let (mut up, mut down) = (q, q);
                up[j] += 1e-6;
                down[j] -= 1e-6;
                let fd = (cql_penalty(&up, 1, form) - cql_penalty(&down, 1, form)) / 2e-6;
                assert_abs_diff_eq!(g[j], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn zero_alpha_is_plain_td_loss() {
        let q = array![[1.0, 2.0, 3.0], [0.0, -1.0, 1.0]];
        let b = batch_of(Array2::zeros((2, 2)), vec![2, 0], vec![0.0; 2], Array2::zeros((2, 2)), vec![true; 2]);
        let targets = [2.0, 1.0];
        let (d, g) = loss_and_gradient(&q, &b, &targets, 0.0, CqlForm::Mean);
        assert_abs_diff_eq!(d.td_loss, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.loss, 1.0, epsilon = 1e-12);
        // penalty still reported: (2 - 3 + 0 - 0) / 2
        assert_abs_diff_eq!(d.cql, -0.5, epsilon = 1e-12);
        assert_eq!(g, array![[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]]);
    }

    /// Finite-difference check of the full training loss through the network.
    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Network::new(Architecture::dueling(4, &[6, 5, 3], 5), 1);
        let states = Array2::from_shape_fn((8, 4), |_| rng.gen_range(-1.0..1.0));
        let b = batch_of(states.clone(), (0..8).map(|i| i % 5).collect(), vec![0.0; 8], Array2::zeros((8, 4)), vec![true; 8]);
        let targets: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        for form in [CqlForm::Mean, CqlForm::LogSumExp] {
            let loss = |n: &Network| {
                let q = n.forward(states.view()).unwrap();
                loss_and_gradient(&q, &b, &targets, 0.7, form).0.loss
            };
            let (q, cache) = net.forward_cached(states.view()).unwrap();
            let (_, gq) = loss_and_gradient(&q, &b, &targets, 0.7, form);
            let g = net.backward(&cache, gq.view());
            for i in 0..net.params.len() {
                let orig = net.params[i];
                net.params[i] = orig + 1e-5;
                let up = loss(&net);
                net.params[i] = orig - 1e-5;
                let down = loss(&net);
                net.params[i] = orig;
                let fd = (up - down) / 2e-5;
                let denom = fd.abs().max(g[i].abs()).max(1e-7);
                assert!((fd - g[i]).abs() / denom < 1e-4, "{form:?} param {i}: {} vs {fd}", g[i]);
            }
        }
    }

    /// Episodes over random 6-d states with uniformly random logged actions
    /// that never include `skip`.
    pub(crate) fn toy_episodes(n: usize, seed: u64, skip: Option<usize>) -> Vec<Episode> {
        use crate::featurize::{DecisionContext, PatientMeta};
        use crate::reward::RewardVitals;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                let len = rng.gen_range(3..8);
                let states: Vec<Vec<f64>> = (0..len).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let actions: Vec<usize> = (0..len)
                    .map(|_| loop {
                        let a = rng.gen_range(0..N_ACTIONS);
                        if Some(a) != skip {
                            break a;
                        }
                    })
                    .collect();
                let died = rng.gen_bool(0.3);
                let rewards: Vec<f64> = (0..len)
                    .map(|t| {
                        if t + 1 == len {
                            if died { -15.0 } else { 15.0 }
                        } else {
                            states[t][0] - 0.1 * (actions[t] % 4) as f64
                        }
                    })
                    .collect();
                Episode {
                    patient_id: format!("toy{k}"),
                    test: false,
                    mortality: died,
                    meta: PatientMeta { female: false, height_cm: 170.0, weight_kg: 70.0, burns: false },
                    states,
                    actions,
                    rewards,
                    vitals: vec![RewardVitals { sofa: 2.0, lactate: 1.0, glucose: 150.0, phosphate: 3.5 }; len],
                    contexts: vec![DecisionContext { icu_day: 1, feeding_day: 1, crrt: false }; len],
                }
            })
            .collect()
    }

    fn small_cfg(alpha: f64, seed: u64, steps: usize) -> TrainConfig {
        TrainConfig {
            alpha,
            gamma: 0.9,
            lr: 1e-3,
            batch_size: 64,
            steps,
            target_sync: 100,
            eval_every: 100,
            seed,
            hidden: vec![32, 32],
            ..Default::default()
        }
    }

    #[test]
    fn identical_runs_have_identical_logs() {
        let eps = toy_episodes(60, 1, None);
        let data = TransitionSet::from_episodes(&eps);
        let a = train(&data, &small_cfg(0.5, 3, 200), None, None).unwrap();
        let b = train(&data, &small_cfg(0.5, 3, 200), None, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best.params, b.best.params);
    }

    #[test]
    fn loss_trends_down_early() {
        let eps = toy_episodes(200, 4, None);
        let data = TransitionSet::from_episodes(&eps);
        let mut cfg = small_cfg(0.0, 1, 200);
        cfg.eval_every = 20;
        let out = train(&data, &cfg, None, None).unwrap();
        let first = out.log.first().unwrap().td_loss;
        let last = out.log.last().unwrap().td_loss;
        assert!(last < first, "td loss {first} -> {last}");
        assert!(out.log.iter().all(|r| r.td_loss.is_finite()));
    }

    #[test]
    fn empty_split_is_error() {
        let data = TransitionSet::from_episodes(&[]);
        assert!(matches!(train(&data, &small_cfg(0.5, 0, 10), None, None), Err(Error::Empty(_))));
    }

    #[test]
    fn cql_pushes_down_unseen_action() {
        let skip = 13;
        let train_eps = toy_episodes(300, 7, Some(skip));
        let test_eps = toy_episodes(100, 8, Some(skip));
        let data = TransitionSet::from_episodes(&train_eps);
        let test = TransitionSet::from_episodes(&test_eps);
        let gap = |alpha: f64| {
            let out = train(&data, &small_cfg(alpha, 5, 600), None, None).unwrap();
            let q = out.nets.online.forward(test.states.view()).unwrap();
            (0..test.len()).map(|i| q[[i, skip]] - q[[i, test.actions[i]]]).sum::<f64>() / test.len() as f64
        };
        let (g0, g1) = (gap(0.0), gap(1.0));
        assert!(g0 - g1 >= 0.5, "gap alpha=0 {g0}, alpha=1 {g1}");
    }

    #[test]
    fn model_selection_uses_validation() {
        let eps = toy_episodes(80, 2, None);
        let data = TransitionSet::from_episodes(&eps);
        let behavior: Vec<Array2<f64>> = eps.iter().map(|e| Array2::from_elem((e.len(), N_ACTIONS), 1.0 / 51.0)).collect();
        let v = Validation { episodes: &eps, behavior: &behavior, gamma: 0.99, kappa: 0.01 };
        let out = train(&data, &small_cfg(0.5, 1, 300), Some(&v), None).unwrap();
        let best = out.log.iter().filter_map(|r| r.validation_cwpdis).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_value, Some(best));
        assert_abs_diff_eq!(greedy_cwpdis(&out.best, &v).unwrap(), best, epsilon = 1e-12);
    }

    #[test]
    fn grid_emits_one_ranked_row_per_pair() {
        let eps = toy_episodes(40, 3, None);
        let data = TransitionSet::from_episodes(&eps);
        let behavior: Vec<Array2<f64>> = eps.iter().map(|e| Array2::from_elem((e.len(), N_ACTIONS), 1.0 / 51.0)).collect();
        let v = Validation { episodes: &eps, behavior: &behavior, gamma: 0.99, kappa: 0.01 };
        let cfg = TrainConfig { steps: 20, eval_every: 10, ..small_cfg(0.5, 1, 20) };
        let rows = grid_search(&data, &cfg, &v).unwrap();
        assert_eq!(rows.len(), 16);
        assert!(rows.windows(2).all(|w| w[0].validation_cwpdis >= w[1].validation_cwpdis));
        assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), (1..=16).collect::<Vec<_>>());
    }

    #[test]
    fn bc_learns_a_separable_rule() {
        // action determined by which of 4 intervals feature 0 falls in
        let mut eps = toy_episodes(400, 9, None);
        let rule = |x: f64| [0usize, 7, 13, 40][((x + 1.0) * 2.0).floor().clamp(0.0, 3.0) as usize];
        for e in &mut eps {
            for t in 0..e.len() {
                e.actions[t] = rule(e.states[t][0]);
            }
        }
        let (train_eps, test_eps) = eps.split_at(300);
        let cfg = BcConfig { steps: 1500, batch_size: 128, hidden: vec![32, 32], ..Default::default() };
        let (net, report) =
            train_bc(&TransitionSet::from_episodes(train_eps), &cfg, Some(&TransitionSet::from_episodes(test_eps))).unwrap();
        assert!(report.test_accuracy.unwrap() > 0.95, "{:?}", report.test_accuracy);
        let p = softmax_rows(&net.forward(TransitionSet::from_episodes(test_eps).states.view()).unwrap());
        for r in p.rows() {
            assert_abs_diff_eq!(r.sum(), 1.0, epsilon = 1e-9);
        }
        assert!(report.per_class_log_likelihood[7].is_some());
        assert!(report.per_class_log_likelihood[8].is_none());
    }

    #[test]
    fn bc_on_random_labels_is_at_chance() {
        let train_eps = toy_episodes(1500, 10, None);
        let test_eps = toy_episodes(1500, 11, None);
        let cfg = BcConfig { steps: 300, batch_size: 256, hidden: vec![16], ..Default::default() };
        let (_, report) =
            train_bc(&TransitionSet::from_episodes(&train_eps), &cfg, Some(&TransitionSet::from_episodes(&test_eps))).unwrap();
        let acc = report.test_accuracy.unwrap();
        assert!((acc - 1.0 / 51.0).abs() < 0.02, "accuracy {acc}");
    }
}
