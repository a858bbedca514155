//! Acceptance gate. Every criterion runs in isolation and prints one
//! PASS/FAIL line; the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use enteral_rl::action::{discretize_dose, ActionCode, Component, QuantileThresholds, N_ACTIONS};
use enteral_rl::featurize::{DecisionContext, Episode, PatientMeta};
use enteral_rl::nn::{Architecture, Network};
use enteral_rl::ope::{cwpdis, LoggedStep};
use enteral_rl::pipeline::{self, RunConfig};
use enteral_rl::policy::{guideline_action, GuidelineParams, PolicyKind};
use enteral_rl::reward::{
    biomarker_reward, deviation, phys_reward, shaping_f, terminal_reward, total_reward, RewardConfig, RewardVitals,
};
use enteral_rl::training::{
    double_q_target, loss_and_gradient, train, Batch, CqlForm, TrainConfig, TransitionSet,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- rewards

fn reward_exactness() -> Outcome {
    let cfg = RewardConfig::default();
    check!(terminal_reward(false, &cfg) == 15.0 && terminal_reward(true, &cfg) == -15.0, "terminal reward");
    let phys = [
        ((5.0, 5.0, 2.0, 2.0), -0.025),
        ((0.0, 0.0, 1.0, 1.0), 0.0),
        ((6.0, 4.0, 3.0, 2.0), 0.25 + 2.0 * 1f64.tanh()),
    ];
    for ((s0, s1, l0, l1), want) in phys {
        let got = phys_reward(s0, s1, l0, l1, &cfg);
        check!(close(got, want, 1e-6), "phys({s0},{s1},{l0},{l1}) = {got}, want {want}");
    }
    check!(close(phys_reward(6.0, 4.0, 3.0, 2.0, &cfg), 1.7732, 1e-4), "phys hand value 1.7732");
    let g = cfg.glucose_range;
    let f_hand = |x: f64| 2.0 / (1.0 + (-(x - g[0])).exp()) - 2.0 / (1.0 + (-(x - g[1])).exp());
    for (x, want) in [(160.0, 2.0), (140.0, 1.0)] {
        check!(close(shaping_f(x, g), want, 1e-6), "f({x}) = {}", shaping_f(x, g));
        check!(close(shaping_f(x, g), f_hand(x), 1e-12), "f({x}) differs from logistic difference");
    }
    check!(close(deviation(200.0, g), 0.5, 1e-12), "deviation(200)");
    check!(close(deviation(1.5, cfg.phosphate_range), 0.5, 1e-12), "phosphate deviation(1.5)");
    let bonus = biomarker_reward(200.0, 180.0, g, cfg.epsilon);
    check!(close(bonus, 1.1, 1e-6), "200 -> 180 gives {bonus}");
    check!(close(biomarker_reward(160.0, 160.0, g, cfg.epsilon), 2.0, 1e-6), "plateau");
    let neutral = RewardVitals { sofa: 0.0, lactate: 1.0, glucose: 160.0, phosphate: 3.5 };
    let r = total_reward(&neutral, Some(&neutral), false, false, &cfg);
    // phosphate's range is 2 units wide, so its plateau is 2 tanh(0.5), not 2
    let want = f_hand(160.0) + 2.0 * 0.5f64.tanh();
    check!(close(r, want, 1e-6), "neutral transition reward {r}, want {want}");
    check!(total_reward(&neutral, None, true, false, &cfg) == 15.0, "terminal survivor");
    Ok("terminal, physiological, shaping, deviation and bonus hand cases".into())
}

// ---------------------------------------------------------------- gradients

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn random_batch(n: usize, dim: usize, n_actions: usize, rng: &mut ChaCha8Rng) -> Batch {
    let terminal: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let mut next_states = random_matrix(n, dim, rng);
    for (i, &t) in terminal.iter().enumerate() {
        if t {
            next_states.row_mut(i).fill(0.0);
        }
    }
    Batch {
        states: random_matrix(n, dim, rng),
        actions: (0..n).map(|_| rng.gen_range(0..n_actions)).collect(),
        rewards: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        next_states,
        terminal,
    }
}

/// Full training loss (squared TD error plus conservative penalty) at fixed targets.
fn training_loss(net: &Network, batch: &Batch, targets: &[f64], alpha: f64, form: CqlForm) -> f64 {
    let q = net.forward(batch.states.view()).unwrap();
    loss_and_gradient(&q, batch, targets, alpha, form).0.loss
}

fn gradient_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (dim, n_actions) = (5, 4 + (seed as usize % 3));
        let arch = Architecture::dueling(dim, &[8, 6], n_actions);
        let mut net = Network::new(arch.clone(), seed);
        let target = Network::new(arch, seed + 50);
        let batch = random_batch(7, dim, n_actions, &mut rng);
        let targets = double_q_target(&batch, &net, &target, 0.9).unwrap();
        let form = if seed % 2 == 0 { CqlForm::Mean } else { CqlForm::LogSumExp };
        let alpha = [0.0, 0.1, 0.5, 1.0][seed as usize % 4];
        let (q, cache) = net.forward_cached(batch.states.view()).unwrap();
        let (_, upstream) = loss_and_gradient(&q, &batch, &targets, alpha, form);
        let analytic = net.backward(&cache, upstream.view());
        let h = 1e-5;
        for i in 0..net.params.len() {
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = training_loss(&net, &batch, &targets, alpha, form);
            net.params[i] = orig - h;
            let down = training_loss(&net, &batch, &targets, alpha, form);
            net.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs());
            if scale < 1e-8 {
                continue;
            }
            let rel = (fd - analytic[i]).abs() / scale;
            worst = worst.max(rel);
            check!(rel < 1e-4, "net {seed}, parameter {i} ({}): analytic {} vs numeric {fd}", net.layer_of(i), analytic[i]);
        }
    }
    Ok(format!("12 dueling nets, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- dueling identity

fn dueling_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Network::new(Architecture::dueling(10, &[16, 12], N_ACTIONS), 3);
    let states = random_matrix(1000, 10, &mut rng);
    let (v, _) = net.value_advantage(states.view()).unwrap();
    let q = net.forward(states.view()).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let mean_gap = q.row(i).iter().map(|x| x - v[i]).sum::<f64>() / N_ACTIONS as f64;
        worst = worst.max(mean_gap.abs());
    }
    check!(worst < 1e-9, "mean of Q - V reaches {worst}");
    let bias = net.layer("advantage").unwrap().bias_range();
    for p in &mut net.params[bias] {
        *p += 3.7;
    }
    let shifted = net.forward(states.view()).unwrap();
    let diff = (&shifted - &q).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    check!(diff <= 1e-12, "advantage bias shift moved Q by {diff}");
    Ok(format!("max |mean(Q - V)| {worst:.1e}, bias-shift change {diff:.1e}"))
}

// ---------------------------------------------------------------- double-Q target

/// Two-action net with one hidden unit: h = relu(x), value = 0,
/// advantages (a0, a1) = (w0 h, w1 h), so Q = ((w0 - w1) h / 2, (w1 - w0) h / 2).
fn tiny_net(w0: f64, w1: f64) -> Network {
    let mut net = Network::zeros(Architecture::dueling(1, &[1], 2));
    let l = net.layer("hidden1").unwrap();
    net.params[l.weight_range()][0] = 1.0;
    let a = net.layer("advantage").unwrap();
    let w = a.weight_range();
    net.params[w.start] = w0;
    net.params[w.start + 1] = w1;
    net
}

fn double_q_targets() -> Outcome {
    // online prefers action 1 at x = 1, target prefers action 0
    let online = tiny_net(0.0, 2.0);
    let target = tiny_net(1.5, 0.5);
    let q_on = online.forward(Array2::from_elem((1, 1), 1.0).view()).unwrap();
    let q_tg = target.forward(Array2::from_elem((1, 1), 1.0).view()).unwrap();
    check!(q_on[[0, 1]] > q_on[[0, 0]], "online argmax should be action 1: {q_on}");
    check!(close(q_tg[[0, 1]], -0.5, 1e-12), "target Q(s', 1) = {}", q_tg[[0, 1]]);

    let batch = Batch {
        states: Array2::zeros((3, 1)),
        actions: vec![0, 1, 0],
        rewards: vec![-15.0, 1.0, 0.25],
        next_states: Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap(),
        terminal: vec![true, false, false],
    };
    let y = double_q_target(&batch, &online, &target, 0.99).unwrap();
    check!(y[0] == -15.0, "terminal target {}", y[0]);
    // hand values: x = 1 -> 1 + 0.99 * (-0.5); x = 2 -> 0.25 + 0.99 * (-1.0)
    let want = [1.0 + 0.99 * -0.5, 0.25 + 0.99 * -1.0];
    check!(close(y[1], want[0], 1e-9), "target {} vs {}", y[1], want[0]);
    check!(close(y[2], want[1], 1e-9), "target {} vs {}", y[2], want[1]);

    // online == target reduces to the max-based target
    let same = double_q_target(&batch, &target, &target, 0.99).unwrap();
    check!(close(same[1], 1.0 + 0.99 * 0.5, 1e-12), "max-based target {}", same[1]);
    Ok(format!("terminal -15 exact, non-terminal {:.4} and {:.4}", y[1], y[2]))
}

// ---------------------------------------------------------------- conservative penalty

/// Episodes over 6 random features whose logged actions never include `skip`.
fn episodes_without(n: usize, seed: u64, skip: usize) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let len = rng.gen_range(3..8);
            let states: Vec<Vec<f64>> = (0..len).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let actions: Vec<usize> = (0..len)
                .map(|_| loop {
                    let a = rng.gen_range(0..N_ACTIONS);
                    if a != skip {
                        break a;
                    }
                })
                .collect();
            let died = rng.gen_bool(0.3);
            let rewards = (0..len)
                .map(|t| if t + 1 == len { if died { -15.0 } else { 15.0 } } else { states[t][0] - 0.1 * (actions[t] % 4) as f64 })
                .collect();
            Episode {
                patient_id: format!("E{k}"),
                test: false,
                mortality: died,
                meta: PatientMeta { female: false, height_cm: 175.0, weight_kg: 75.0, burns: false },
                states,
                actions,
                rewards,
                vitals: vec![RewardVitals { sofa: 2.0, lactate: 1.0, glucose: 160.0, phosphate: 3.5 }; len],
                contexts: vec![DecisionContext { icu_day: 1, feeding_day: 1, crrt: false }; len],
            }
        })
        .collect()
}

fn cql_behavior() -> Outcome {
    let skip = 13;
    let train_set = TransitionSet::from_episodes(&episodes_without(300, 7, skip));
    let held_out = TransitionSet::from_episodes(&episodes_without(100, 8, skip));
    let gap = |alpha: f64, seed: u64| {
        let cfg = TrainConfig {
            alpha,
            gamma: 0.9,
            lr: 1e-3,
            batch_size: 64,
            steps: 600,
            target_sync: 100,
            eval_every: 100,
            seed,
            hidden: vec![32, 32],
            ..Default::default()
        };
        let out = train(&train_set, &cfg, None, None).unwrap();
        let q = out.nets.online.forward(held_out.states.view()).unwrap();
        (0..held_out.len()).map(|i| q[[i, skip]] - q[[i, held_out.actions[i]]]).sum::<f64>() / held_out.len() as f64
    };
    let alphas = [0.0, 0.1, 0.5, 1.0];
    let mut monotone = 0;
    let mut lines = Vec::new();
    let mut first_drop = 0.0;
    for seed in 0..5u64 {
        let gaps: Vec<f64> = alphas.iter().map(|&a| gap(a, seed)).collect();
        if seed == 0 {
            first_drop = gaps[0] - gaps[3];
        }
        if gaps.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
        lines.push(format!("[{}]", gaps.iter().map(|g| format!("{g:.2}")).collect::<Vec<_>>().join(" ")));
    }
    check!(first_drop >= 0.5, "gap drop from alpha 0 to 1 is {first_drop:.3}; gaps {}", lines.join(" "));
    check!(monotone >= 4, "gap monotone in {monotone}/5 seeds; gaps {}", lines.join(" "));
    Ok(format!("drop {first_drop:.2} at seed 0, monotone in {monotone}/5 seeds"))
}

// ---------------------------------------------------------------- CWPDIS

fn cwpdis_correctness() -> Outcome {
    // identical policies: plain mean discounted return
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let gamma: f64 = 0.95;
    let trajectories: Vec<Vec<LoggedStep>> = (0..200)
        .map(|_| {
            let len = rng.gen_range(1..15);
            (0..len)
                .map(|_| {
                    let p = rng.gen_range(0.05..0.9);
                    LoggedStep { reward: rng.gen_range(-3.0..5.0), p_eval: p, p_behavior: p }
                })
                .collect()
        })
        .collect();
    let mean: f64 = trajectories
        .iter()
        .map(|t| t.iter().enumerate().map(|(k, s)| gamma.powi(k as i32) * s.reward).sum::<f64>())
        .sum::<f64>()
        / trajectories.len() as f64;
    let est = cwpdis(&trajectories, gamma).unwrap();
    check!(close(est, mean, 1e-12), "cwpdis {est} vs mean return {mean}");

    // three-state chain, two actions, uniform behavior, horizon 4, exact value by backward induction
    const S: usize = 3;
    const H: usize = 4;
    let p = [
        [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]],
        [[0.4, 0.4, 0.2], [0.1, 0.3, 0.6]],
        [[0.3, 0.2, 0.5], [0.2, 0.1, 0.7]],
    ];
    let r = [[0.2, 1.0], [0.5, -0.4], [1.5, 0.8]];
    let pi = [1usize, 0, 0];
    let g = 0.9;
    let mut v = [0.0; S];
    for _ in 0..H {
        let mut next = [0.0; S];
        for s in 0..S {
            let a = pi[s];
            next[s] = r[s][a] + g * (0..S).map(|s2| p[s][a][s2] * v[s2]).sum::<f64>();
        }
        v = next;
    }
    let exact = v[0];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let data: Vec<Vec<LoggedStep>> = (0..10_000)
        .map(|_| {
            let mut s = 0;
            (0..H)
                .map(|_| {
                    let a = rng.gen_range(0..2);
                    let step = LoggedStep { reward: r[s][a], p_eval: (a == pi[s]) as u8 as f64, p_behavior: 0.5 };
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    for (s2, &prob) in p[s][a].iter().enumerate() {
                        acc += prob;
                        if u < acc {
                            s = s2;
                            break;
                        }
                    }
                    step
                })
                .collect()
        })
        .collect();
    let est = cwpdis(&data, g).unwrap();
    let rel = ((est - exact) / exact).abs();
    check!(rel < 0.05, "cwpdis {est} vs exact {exact} ({:.1}%)", 100.0 * rel);
    Ok(format!("identity exact; chain MDP {est:.4} vs exact {exact:.4} ({:.2}% off)", 100.0 * rel))
}

// ---------------------------------------------------------------- guideline

/// Level triple -> id, transcribed from the reference action table.
const REFERENCE_TABLE: [(usize, u8, u8, u8, u32); N_ACTIONS] = [
    (0, 1, 1, 1, 21268), (1, 4, 4, 4, 15932), (2, 4, 4, 3, 13241), (3, 2, 2, 1, 11755), (4, 4, 4, 2, 9322),
    (5, 3, 3, 2, 9179), (6, 1, 1, 2, 9000), (7, 2, 2, 2, 8683), (8, 1, 1, 4, 8392), (9, 1, 1, 3, 8093),
    (10, 3, 3, 3, 7969), (11, 2, 2, 3, 6763), (12, 3, 3, 1, 5740), (13, 2, 2, 4, 5536), (14, 3, 3, 4, 5458),
    (15, 4, 3, 4, 5169), (16, 3, 4, 2, 4777), (17, 2, 3, 2, 4695), (18, 3, 4, 3, 4644), (19, 1, 2, 1, 4325),
    (20, 4, 3, 3, 4253), (21, 3, 2, 4, 4098), (22, 2, 3, 1, 3993), (23, 3, 2, 3, 3485), (24, 2, 1, 4, 3434),
    (25, 3, 4, 4, 3266), (26, 3, 2, 2, 3147), (27, 2, 3, 3, 3128), (28, 4, 3, 2, 2980), (29, 3, 2, 1, 2352),
    (30, 4, 4, 1, 2337), (31, 2, 1, 3, 2232), (32, 1, 2, 2, 1955), (33, 2, 3, 4, 1774), (34, 2, 1, 2, 1578),
    (35, 1, 2, 3, 1384), (36, 4, 3, 1, 1218), (37, 2, 1, 1, 1205), (38, 3, 4, 1, 1179), (39, 1, 2, 4, 1062),
    (40, 4, 2, 4, 1037), (41, 3, 1, 4, 535), (42, 2, 4, 1, 385), (43, 2, 4, 2, 368), (44, 4, 2, 3, 324),
    (45, 2, 4, 3, 311), (46, 1, 3, 1, 272), (47, 2, 4, 4, 249), (48, 3, 1, 3, 163), (49, 4, 2, 2, 162),
    (50, 1, 3, 2, 147),
];

/// Upper cut-points of levels 1..3 (kcal/kg, g/kg, ml/kg per 4 h).
const CUTS: [[f64; 3]; 3] = [[1.91, 3.05, 4.13], [0.08, 0.14, 0.19], [3.61, 5.40, 8.15]];

fn reference_id(levels: (u8, u8, u8)) -> Option<usize> {
    REFERENCE_TABLE.iter().find(|r| (r.1, r.2, r.3) == levels).map(|r| r.0)
}

/// Level by the documented convention: a dose equal to a cut-point stays in the lower level.
fn reference_level(component: usize, dose: f64) -> u8 {
    1 + CUTS[component].iter().filter(|&&c| dose > c).count() as u8
}

struct GuidelineCase {
    name: &'static str,
    bmi: f64,
    female: bool,
    burns: bool,
    crrt: bool,
    icu_day: u32,
    feeding_day: u32,
}

/// Daily targets by hand: (kcal/kg, g protein/kg actual weight).
fn reference_daily(case: &GuidelineCase, height_cm: f64) -> (f64, f64) {
    let weight = case.bmi * (height_cm / 100.0).powi(2);
    let kcal = if case.bmi < 30.0 {
        25.0
    } else if case.bmi <= 50.0 {
        22.0
    } else {
        11.0
    };
    let kcal = if case.feeding_day <= 3 { 0.7 * kcal } else { kcal };
    let inches_over_five_feet = height_cm / 2.54 - 60.0;
    let ibw = if case.female { 45.5 } else { 50.0 } + 2.3 * inches_over_five_feet;
    let protein = if case.crrt {
        2.5
    } else if case.burns {
        2.0
    } else if case.icu_day <= 2 {
        0.8
    } else if case.icu_day <= 4 {
        1.0
    } else if case.bmi < 30.0 {
        1.2
    } else if case.bmi <= 40.0 {
        2.0 * ibw / weight
    } else {
        2.5 * ibw / weight
    };
    (kcal, protein)
}

fn guideline_golden_cases() -> Outcome {
    let cases = [
        GuidelineCase { name: "bmi<30 stable", bmi: 25.0, female: false, burns: false, crrt: false, icu_day: 5, feeding_day: 5 },
        GuidelineCase { name: "bmi<30 early days 1-2", bmi: 25.0, female: false, burns: false, crrt: false, icu_day: 2, feeding_day: 2 },
        GuidelineCase { name: "early protein days 3-4", bmi: 25.0, female: true, burns: false, crrt: false, icu_day: 4, feeding_day: 4 },
        GuidelineCase { name: "70% factor on feeding day 3", bmi: 25.0, female: false, burns: false, crrt: false, icu_day: 6, feeding_day: 3 },
        GuidelineCase { name: "bmi 30-40 stable (IBW protein)", bmi: 35.0, female: false, burns: false, crrt: false, icu_day: 6, feeding_day: 6 },
        GuidelineCase { name: "bmi 40-50 stable (IBW protein)", bmi: 45.0, female: true, burns: false, crrt: false, icu_day: 6, feeding_day: 6 },
        GuidelineCase { name: "bmi>50 calories", bmi: 55.0, female: false, burns: false, crrt: false, icu_day: 6, feeding_day: 6 },
        GuidelineCase { name: "burns override", bmi: 25.0, female: false, burns: true, crrt: false, icu_day: 6, feeding_day: 6 },
        GuidelineCase { name: "crrt override regardless of bmi", bmi: 45.0, female: false, burns: false, crrt: true, icu_day: 6, feeding_day: 6 },
        GuidelineCase { name: "crrt override, early", bmi: 25.0, female: false, burns: false, crrt: true, icu_day: 1, feeding_day: 1 },
    ];
    let height = 175.0;
    let mut summary = Vec::new();
    for case in &cases {
        let (kcal, protein) = reference_daily(case, height);
        let doses = [kcal / 6.0, protein / 6.0, 1.5 * kcal / 6.0];
        let levels = (reference_level(0, doses[0]), reference_level(1, doses[1]), reference_level(2, doses[2]));
        let want = reference_id(levels).ok_or_else(|| format!("{}: triple {levels:?} is not an observed action", case.name))?;
        let meta = PatientMeta {
            female: case.female,
            height_cm: height,
            weight_kg: case.bmi * (height / 100.0f64).powi(2),
            burns: case.burns,
        };
        let ctx = DecisionContext { icu_day: case.icu_day, feeding_day: case.feeding_day, crrt: case.crrt };
        let got = guideline_action(&meta, &ctx, &GuidelineParams::default(), &QuantileThresholds::default())
            .map_err(|e| format!("{}: {e}", case.name))?;
        check!(got == want, "{}: id {got}, want {want} {levels:?}", case.name);
        summary.push(want.to_string());
    }
    // the two worked examples in closed form
    check!(summary[0] == "2" && summary[1] == "7", "stable and early examples give ids {} and {}", summary[0], summary[1]);
    Ok(format!("{} rule branches, ids {}", cases.len(), summary.join(",")))
}

// ---------------------------------------------------------------- action codec

fn action_codec() -> Outcome {
    for &(id, c, p, w, _) in &REFERENCE_TABLE {
        let code = ActionCode::from_id(id).map_err(|e| e.to_string())?;
        check!((code.cal, code.pro, code.water) == (c, p, w), "id {id} decodes to {code:?}");
        check!(ActionCode::new(c, p, w).map_err(|e| e.to_string())?.id() == Some(id), "({c},{p},{w}) encodes wrongly");
    }
    let mut unobserved = 0;
    for c in 1..=4 {
        for p in 1..=4 {
            for w in 1..=4 {
                if reference_id((c, p, w)).is_none() {
                    unobserved += 1;
                    check!(ActionCode::new(c, p, w).unwrap().id().is_none(), "({c},{p},{w}) should be unobserved");
                }
            }
        }
    }
    check!(unobserved == 13, "{unobserved} unobserved triples");

    let t = QuantileThresholds::default();
    let components = [Component::Calories, Component::Protein, Component::Water];
    let mut boundary_checks = 0;
    for (ci, comp) in components.iter().enumerate() {
        for (k, &cut) in CUTS[ci].iter().enumerate() {
            let at = t.level(*comp, cut);
            let above = t.level(*comp, cut * (1.0 + 1e-9));
            check!(at == k as u8 + 1 && at == reference_level(ci, cut), "{} at cut {cut} -> level {at}", comp.name());
            check!(above == k as u8 + 2, "{} just above {cut} -> level {above}", comp.name());
            boundary_checks += 2;
        }
    }
    let code = discretize_dose(4.2, 0.2, 6.0, &t).map_err(|e| e.to_string())?;
    check!((code.cal, code.pro, code.water) == (4, 4, 3) && code.id() == Some(2), "dose discretization {code:?}");
    check!(discretize_dose(0.0, 0.1, 1.0, &t).is_err(), "zero dose accepted");
    Ok(format!("51 ids round-trip, 13 unobserved triples, {boundary_checks} boundary checks"))
}

// ---------------------------------------------------------------- end to end

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn end_to_end(out: &Path) -> Outcome {
    let mut cfg = RunConfig::load(&config_path("acceptance.toml")).map_err(|e| e.to_string())?;
    cfg.out_dir = out.to_path_buf();
    check!(cfg.synth.n_patients == 5000 && cfg.synth.effect_strength > 0.0, "acceptance config changed");
    let started = std::time::Instant::now();
    let report = pipeline::run_all(&cfg, false).map_err(|e| e.to_string())?;
    let minutes = started.elapsed().as_secs_f64() / 60.0;

    let cal = &report.calibration;
    let mut failures = Vec::new();
    if !(cal.spearman_rho < 0.0 && cal.spearman_p < 0.01) {
        failures.push(format!("(a) return-mortality rho {:.3}, p {:.2e}", cal.spearman_rho, cal.spearman_p));
    }
    let get = |k: PolicyKind| report.policy(k).ok_or(format!("{} missing from report", k.name()));
    let deepen = get(PolicyKind::Deepen)?;
    for curve in &deepen.dosage_curves {
        if !curve.min_at_zero {
            let bins: Vec<String> = curve
                .bins
                .iter()
                .map(|b| format!("{}:{}:{}", b.difference, b.count, b.value.map_or("-".into(), |v| format!("{v:.3}"))))
                .collect();
            failures.push(format!("(b) {} minimum not at 0 [{}]", curve.component.name(), bins.join(" ")));
        }
    }
    let (bc, random) = (get(PolicyKind::Bc)?, get(PolicyKind::Random)?);
    if !(deepen.cwpdis > bc.cwpdis && deepen.cwpdis > random.cwpdis) {
        failures.push(format!(
            "(c) CWPDIS deepen {:.3}, bc {:.3}, random {:.3}",
            deepen.cwpdis, bc.cwpdis, random.cwpdis
        ));
    }
    let detail = format!(
        "rho {:.3} (p {:.1e}); CWPDIS deepen {:.2}, bc {:.2}, random {:.2}; {:.1} min",
        cal.spearman_rho, cal.spearman_p, deepen.cwpdis, bc.cwpdis, random.cwpdis, minutes
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", failures.join("; ")))
    }
}

fn checksums(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = Sha256::digest(std::fs::read(&path).unwrap());
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

fn determinism(root: &Path) -> Outcome {
    let mut sums = Vec::new();
    for run in ["first", "second"] {
        let mut cfg = RunConfig::load(&config_path("smoke.toml")).map_err(|e| e.to_string())?;
        cfg.out_dir = root.join(run);
        pipeline::run_all(&cfg, false).map_err(|e| e.to_string())?;
        sums.push(checksums(&cfg.out_dir));
    }
    check!(sums[0].len() >= 15, "only {} files emitted", sums[0].len());
    let keys: Vec<&String> = sums[0].keys().collect();
    check!(keys == sums[1].keys().collect::<Vec<_>>(), "file sets differ");
    let differing: Vec<&String> = keys.iter().copied().filter(|k| sums[0][*k] != sums[1][*k]).collect();
    check!(differing.is_empty(), "files differ: {differing:?}");
    Ok(format!("{} files checksum-identical across two runs", keys.len()))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let e2e_dir = tmp.path().join("end_to_end");
    let det_dir = tmp.path().join("determinism");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("reward exactness", Box::new(reward_exactness)),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("dueling identity", Box::new(dueling_identity)),
        ("double-Q target", Box::new(double_q_targets)),
        ("conservative penalty behavior", Box::new(cql_behavior)),
        ("CWPDIS correctness", Box::new(cwpdis_correctness)),
        ("guideline golden cases", Box::new(guideline_golden_cases)),
        ("action codec", Box::new(action_codec)),
        ("end-to-end synthetic reproduction", Box::new(move || end_to_end(&e2e_dir))),
        ("determinism", Box::new(move || determinism(&det_dir))),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
