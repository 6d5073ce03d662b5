//! Acceptance criteria, one PASS/FAIL line each. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 3 5`.

mod common;

use std::time::{Duration, Instant};

use cavat::adversarial::{gen_perturbation, AdvConfig};
use cavat::baselines::MethodId;
use cavat::constraints::{
    connectivity_reward, connectivity_reward_from_seed, select_seed, Constraint, ConnectivityConfig,
    GlobalConnectivity, LocalConnectivity,
};
use cavat::harness::{csv_string, run_experiment_with_data, CsvRow, TrainConfig};
use cavat::losses::{
    cavat_inner, cross_entropy, cross_entropy_term, kl_lds, kl_lds_term, reinforce_constraint, LossWeights,
    MonteCarloConfig, PROB_FLOOR,
};
use cavat::metrics::{dsc, hausdorff, n_conn};
use cavat::net::GradientSet;
use cavat::{Adjacency, ArchConfig, BinaryMask, DiscreteMask, Grid, Image, NetworkParams, ProbMap, RngState};
use common::*;

const BENCHMARK: &str = include_str!("../../../configs/benchmark.toml");

type Outcome = Result<String, String>;
type LossFn<'a> = Box<dyn Fn(&NetworkParams) -> f64 + 'a>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn random_probmap(h: usize, w: usize, c: usize, rng: &mut RngState) -> ProbMap {
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        let raw: Vec<f64> = (0..c).map(|_| rng.uniform().powi(3) + 1e-9).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    ProbMap::new(h, w, c, data).unwrap()
}

/// Two-pixel-class net on a 2×2 input: `p_fg = 0.9` on the diagonal, `0.1` off it.
fn two_by_two() -> (NetworkParams, Image) {
    let arch = ArchConfig {
        hidden: vec![],
        classes: 2,
        kernel: 1,
    };
    let mut net = NetworkParams::zeros(&arch).unwrap();
    let a = 9f64.ln() / 4.0;
    net.tensors_mut()[0].data.copy_from_slice(&[-a, a]);
    let x = Grid::from_vec(2, 2, vec![2.0, -2.0, -2.0, 2.0]).unwrap();
    (net, x)
}

/// `Σ_ŷ J(ŷ)·p(ŷ)` over all 16 masks.
fn expected_reward(net: &NetworkParams, x: &Image) -> f64 {
    let p = net.predict(x).unwrap();
    let constraint = GlobalConnectivity {
        adjacency: Adjacency::Four,
        foreground: 1,
    };
    let mut total = 0.0;
    for bits in 0u32..16 {
        let labels: Vec<u32> = (0..4).map(|i| (bits >> i) & 1).collect();
        let prob: f64 = labels.iter().enumerate().map(|(i, &y)| p.prob(i, y as usize)).product();
        let mask = DiscreteMask::new(Grid::from_vec(2, 2, labels).unwrap(), 2).unwrap();
        let j = constraint.evaluate(&mask, &mut RngState::new(0)).unwrap()[(0, 0)];
        total += prob * j as u8 as f64;
    }
    total
}

fn fd_gradient(net: &NetworkParams, step: f64, f: impl Fn(&NetworkParams) -> f64) -> Vec<Vec<f64>> {
    let mut probe = net.clone();
    let mut out = Vec::new();
    for t in 0..net.tensors().len() {
        let mut g = Vec::with_capacity(net.tensors()[t].data.len());
        for i in 0..net.tensors()[t].data.len() {
            let orig = probe.tensors()[t].data[i];
            probe.tensors_mut()[t].data[i] = orig + step;
            let up = f(&probe);
            probe.tensors_mut()[t].data[i] = orig - step;
            let down = f(&probe);
            probe.tensors_mut()[t].data[i] = orig;
            g.push((up - down) / (2.0 * step));
        }
        out.push(g);
    }
    out
}

fn reinforce_gradient(net: &NetworkParams, x: &Image, m: usize, seed: u64) -> GradientSet {
    let constraint = GlobalConnectivity {
        adjacency: Adjacency::Four,
        foreground: 1,
    };
    let pass = net.forward(x).unwrap();
    let mc = MonteCarloConfig {
        samples: m,
        ..MonteCarloConfig::default()
    };
    let rt = reinforce_constraint(&pass.probs, &constraint, &mc, &mut RngState::new(seed)).unwrap();
    net.backward(&pass, &rt.term.d_prob, false).unwrap().params
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (net, x) = two_by_two();
    let n = 4.0;
    let exact: Vec<f64> = fd_gradient(&net, 1e-5, |p| -expected_reward(p, &x) / n).concat();
    let mc = reinforce_gradient(&net, &x, 100_000, 2024).flatten();
    let err = rel_err(&mc, &exact);
    within(start.elapsed(), Duration::from_secs(30))?;
    check(
        err < 0.02,
        format!("relative gradient error {:.4}% over 1e5 samples (limit 2%)", 100.0 * err),
    )
}

/// Variance of the estimator shrinks like 1/m.
fn reinforce_variance_ratio() -> (f64, f64) {
    let (net, x) = two_by_two();
    let reps = 300;
    let var = |m: usize| {
        let grads: Vec<Vec<f64>> = (0..reps).map(|r| reinforce_gradient(&net, &x, m, 10_000 + r)).map(|g| g.flatten()).collect();
        let dim = grads[0].len();
        (0..dim)
            .map(|d| {
                let mean = grads.iter().map(|g| g[d]).sum::<f64>() / reps as f64;
                grads.iter().map(|g| (g[d] - mean).powi(2)).sum::<f64>() / (reps - 1) as f64
            })
            .sum::<f64>()
    };
    let (v1, v10, v100) = (var(1), var(10), var(100));
    (v1 / v10, v10 / v100)
}

/// True when no `±step` probe of any single parameter flips a ReLU at any
/// of `inputs`, so central differences see one smooth piece.
fn probes_stay_smooth(net: &NetworkParams, inputs: &[&Image], step: f64) -> bool {
    let base: Vec<Vec<bool>> = inputs.iter().map(|x| net.forward(x).unwrap().relu_pattern()).collect();
    let mut probe = net.clone();
    for t in 0..net.tensors().len() {
        for i in 0..net.tensors()[t].data.len() {
            let orig = probe.tensors()[t].data[i];
            for delta in [step, -step] {
                probe.tensors_mut()[t].data[i] = orig + delta;
                for (x, pattern) in inputs.iter().zip(&base) {
                    if &probe.forward(x).unwrap().relu_pattern() != pattern {
                        return false;
                    }
                }
            }
            probe.tensors_mut()[t].data[i] = orig;
        }
    }
    true
}

/// First seeded 8×8 instance (network, input, perturbed input) on which
/// finite differences with `step` never cross a ReLU kink.
fn smooth_instance(step: f64) -> (u64, NetworkParams, Image, Image) {
    for seed in 8u64.. {
        let mut rng = RngState::new(seed);
        let mut net = NetworkParams::init(&ArchConfig::default(), &mut rng).unwrap();
        for t in net.tensors_mut() {
            if t.name.ends_with("bias") {
                t.data.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
            }
        }
        let x = Grid::from_fn(8, 8, |_, _| rng.normal());
        let d = Grid::from_fn(8, 8, |_, _| rng.normal());
        let norm = d.l2_norm();
        let x_adv = x.add_scaled(&d, 0.5 / norm).unwrap();
        if probes_stay_smooth(&net, &[&x, &x_adv], step) {
            return (seed, net, x, x_adv);
        }
    }
    unreachable!()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (instance, net, x, x_adv) = smooth_instance(1e-4);
    let y = DiscreteMask::from_binary(&Grid::from_fn(8, 8, |r, c| (r as f64 - 3.5).hypot(c as f64 - 3.5) < 2.5));
    let clean = net.predict(&x).unwrap();

    // Fixed Monte-Carlo draw for the surrogate.
    let constraint = LocalConnectivity::new(ConnectivityConfig::default()).unwrap();
    let mc = MonteCarloConfig::default();
    let seed = 99;
    let pass_adv = net.forward(&x_adv).unwrap();
    let rt = reinforce_constraint(&pass_adv.probs, &constraint, &mc, &mut RngState::new(seed)).unwrap();
    let rewards: Vec<Grid<bool>> = rt
        .samples
        .iter()
        .enumerate()
        .map(|(s, mask)| constraint.evaluate(mask, &mut RngState::new(seed).derive(s as u64)).unwrap())
        .collect();
    let surrogate = |p: &NetworkParams| {
        let probs = p.predict(&x_adv).unwrap();
        let n = probs.pixels() as f64;
        let mut v = 0.0;
        for (mask, reward) in rt.samples.iter().zip(&rewards) {
            for (i, (&label, &ok)) in mask.labels().as_slice().iter().zip(reward.as_slice()).enumerate() {
                if ok {
                    v -= probs.prob(i, label as usize).max(PROB_FLOOR).ln();
                }
            }
        }
        v / (mc.samples as f64 * n)
    };

    let pass = net.forward(&x).unwrap();
    let cases: Vec<(&str, GradientSet, LossFn)> = vec![
        (
            "ce",
            net.backward(&pass, &cross_entropy_term(&pass.probs, &y).unwrap().d_prob, false).unwrap().params,
            Box::new(|p: &NetworkParams| cross_entropy(&p.predict(&x).unwrap(), &y).unwrap()),
        ),
        (
            "lds",
            net.backward(&pass_adv, &kl_lds_term(&clean, &pass_adv.probs).unwrap().d_prob, false)
                .unwrap()
                .params,
            Box::new(|p: &NetworkParams| kl_lds(&clean, &p.predict(&x_adv).unwrap()).unwrap()),
        ),
        (
            "reinforce",
            net.backward(&pass_adv, &rt.term.d_prob, false).unwrap().params,
            Box::new(surrogate),
        ),
    ];
    if (surrogate(&net) - rt.term.value).abs() > 1e-12 {
        return Err("surrogate replay does not reproduce the sampled loss".into());
    }
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, analytic, f) in &cases {
        let numeric = fd_gradient(&net, 1e-4, f);
        let err = analytic
            .tensors()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| rel_err(a, n))
            .fold(0.0, f64::max);
        worst = worst.max(err);
        parts.push(format!("{name} {err:.1e}"));
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    check(
        worst < 1e-4,
        format!(
            "worst per-tensor relative error: {} over {} parameters (instance {instance})",
            parts.join(", "),
            net.num_params()
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = ConnectivityConfig::default();
    let mut gen = RngState::new(3);
    for i in 0..1000u64 {
        let density = 0.05 + 0.6 * gen.uniform();
        let mask = random_mask(16, 16, density, &mut gen);
        let reward = connectivity_reward(&mask, &cfg, &mut RngState::new(i)).unwrap();
        let expected = match select_seed(&mask, &cfg, &mut RngState::new(i)).unwrap() {
            Some(seed) => {
                if !seed_candidates(&mask, cfg.seed_window).contains(&seed) {
                    return Err(format!("mask {i}: seed {seed:?} is not a window-count maximizer"));
                }
                reward_oracle(&mask, seed, cfg.violation_window)
            }
            None => Grid::filled(16, 16, true),
        };
        if reward != expected {
            return Err(format!("mask {i}: reward map differs from oracle"));
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    check(true, "1000/1000 masks pixel-exact".into())
}

fn criterion_4() -> Outcome {
    let cfg = ConnectivityConfig::default();
    let mut gen = RngState::new(4);
    let mut violations = 0usize;
    let mut seeds_tried = 0usize;
    for _ in 0..1000 {
        let size = 1 + gen.below(150);
        let mask = connected_mask(16, 16, size, &mut gen);
        for seed in mask.foreground() {
            seeds_tried += 1;
            let reward = connectivity_reward_from_seed(&mask, seed, &cfg).unwrap();
            violations += reward.as_slice().iter().filter(|&&ok| !ok).count();
        }
        let sampled = connectivity_reward(&mask, &cfg, &mut gen).unwrap();
        violations += sampled.as_slice().iter().filter(|&&ok| !ok).count();
    }
    check(
        violations == 0,
        format!("{violations} violated pixels over 1000 masks and {seeds_tried} seeds"),
    )
}

fn criterion_5() -> Outcome {
    let mut gen = RngState::new(5);
    let mut mismatches = 0;
    let mut pairs = 0;
    while pairs < 200 {
        let (h, w) = (4 + gen.below(20), 4 + gen.below(20));
        let a = random_mask(h, w, 0.02 + 0.3 * gen.uniform(), &mut gen);
        let b = random_mask(h, w, 0.02 + 0.3 * gen.uniform(), &mut gen);
        if a.count() == 0 || b.count() == 0 {
            continue;
        }
        pairs += 1;
        if hausdorff(&a, &b).unwrap() != brute_hausdorff(&a, &b) {
            mismatches += 1;
        }
    }
    let mask_of = |pts: &[(usize, usize)]| {
        let mut m: BinaryMask = Grid::filled(4, 4, false);
        for &p in pts {
            m[p] = true;
        }
        m
    };
    let a = mask_of(&[(0, 0), (0, 1), (1, 1)]);
    let dsc_ok = dsc(&a, &a).unwrap() == 1.0
        && dsc(&a, &mask_of(&[(3, 3)])).unwrap() == 0.0
        && dsc(&mask_of(&[(0, 0)]), &a).unwrap() == 0.5;
    let mut nonzero = 0;
    for _ in 0..200 {
        let size = 1 + gen.below(100);
        let m = connected_mask(16, 16, size, &mut gen);
        if n_conn(&m, Adjacency::Four, &mut gen).0 != 0.0 {
            nonzero += 1;
        }
    }
    check(
        mismatches == 0 && dsc_ok && nonzero == 0,
        format!(
            "hausdorff mismatches {mismatches}/200, dsc analytic cases {}, nonzero n_conn on connected masks {nonzero}/200",
            if dsc_ok { "exact" } else { "WRONG" }
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut gen = RngState::new(6);
    let mut min_kl = f64::INFINITY;
    let mut self_kl: f64 = 0.0;
    for _ in 0..1000 {
        let (h, w, c) = (1 + gen.below(6), 1 + gen.below(6), 2 + gen.below(3));
        let p = random_probmap(h, w, c, &mut gen);
        let q = random_probmap(h, w, c, &mut gen);
        min_kl = min_kl.min(kl_lds(&p, &q).unwrap());
        self_kl = self_kl.max(kl_lds(&p, &p).unwrap().abs());
    }
    let one_hot = ProbMap::new(2, 3, 2, [1.0, 0.0].repeat(6)).unwrap();
    let half = ProbMap::uniform(2, 3, 2);
    let analytic = kl_lds(&one_hot, &half).unwrap();
    let err = (analytic - 2f64.ln()).abs();
    check(
        min_kl >= 0.0 && self_kl == 0.0 && err < 1e-9,
        format!("min KL {min_kl:.3e}, max self-KL {self_kl:.1e}, |KL - ln 2| = {err:.1e}"),
    )
}

fn criterion_7() -> Outcome {
    let mut gen = RngState::new(7);
    let constraint = LocalConnectivity::new(ConnectivityConfig::default()).unwrap();
    let mc = MonteCarloConfig::default();
    let mut worst_norm: f64 = 0.0;
    for (t, eps) in [1e-3, 0.1, 1.0, 10.0].into_iter().cycle().take(40).enumerate() {
        let net = NetworkParams::init(&ArchConfig::default(), &mut gen).unwrap();
        let x = Grid::from_fn(8, 8, |_, _| gen.normal());
        let cfg = AdvConfig {
            epsilon: eps,
            ..AdvConfig::default()
        };
        let gamma = (t % 2) as f64;
        let clean = net.predict(&x).unwrap();
        let r = gen_perturbation(&net, &x, &clean, gamma, &constraint, &mc, &cfg, &mut gen.derive(t as u64)).unwrap().r;
        worst_norm = worst_norm.max((r.l2_norm() - eps).abs() / eps);
    }
    let weights = LossWeights {
        lambda: 1.0,
        gamma: 0.0,
    };
    let cfg = AdvConfig::default();
    let mut wins = 0;
    for t in 0..100u64 {
        let net = NetworkParams::init(&ArchConfig::default(), &mut gen).unwrap();
        let x = Grid::from_fn(16, 16, |_, _| gen.normal());
        let clean = net.predict(&x).unwrap();
        let r = gen_perturbation(&net, &x, &clean, 0.0, &constraint, &mc, &cfg, &mut gen.derive(t)).unwrap().r;
        let d = Grid::from_fn(16, 16, |_, _| gen.normal());
        let norm = d.l2_norm();
        let r_rand = d.map(|v| cfg.epsilon * v / norm);
        let adv = cavat_inner(&net, &x, &r, &weights, &constraint, &mc, &mut RngState::new(0)).unwrap();
        let rand = cavat_inner(&net, &x, &r_rand, &weights, &constraint, &mc, &mut RngState::new(0)).unwrap();
        wins += (adv > rand) as usize;
    }
    check(
        worst_norm <= 1e-9 && wins >= 90,
        format!("worst relative norm error {worst_norm:.1e}; adversarial beats random in {wins}/100 trials"),
    )
}

fn benchmark_config() -> TrainConfig {
    TrainConfig::from_toml(BENCHMARK).expect("benchmark config parses")
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let base_cfg = benchmark_config();
    let ds = base_cfg.load_dataset().map_err(|e| e.to_string())?;
    let run = |method| {
        let cfg = TrainConfig {
            method,
            ..base_cfg.clone()
        };
        run_experiment_with_data(&cfg, &ds).map_err(|e| e.to_string())
    };
    let base = run(MethodId::Baseline)?.summary;
    let cavat = run(MethodId::Cavat)?.summary;
    let ablation = run(MethodId::CavatNoPerturb)?.summary;
    within(start.elapsed(), Duration::from_secs(30 * 60))?;
    let reduction = 1.0 - cavat.n_conn.mean / base.n_conn.mean;
    let dsc_drop = base.dsc.mean - cavat.dsc.mean;
    let fmt = |s: &cavat::harness::Summary| {
        format!(
            "{} n_conn {:.3}±{:.3} dsc {:.4}±{:.4}",
            s.method, s.n_conn.mean, s.n_conn.std, s.dsc.mean, s.dsc.std
        )
    };
    check(
        reduction >= 0.2 && dsc_drop <= 0.01,
        format!(
            "n_conn reduction {:.1}%, dsc change {:+.4}; {}; {}; {}; {:.0?}",
            100.0 * reduction,
            -dsc_drop,
            fmt(&base),
            fmt(&cavat),
            fmt(&ablation),
            start.elapsed()
        ),
    )
}

fn short_config(method: MethodId) -> TrainConfig {
    TrainConfig {
        method,
        total_steps: 30,
        eval_every: 10,
        seeds: vec![3],
        gen_n: 120,
        ..benchmark_config()
    }
}

fn criterion_9() -> Outcome {
    let cfg = short_config(MethodId::Cavat);
    let ds = cfg.load_dataset().map_err(|e| e.to_string())?;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for dir in &dirs {
        let cfg = TrainConfig {
            out_dir: Some(dir.path().to_path_buf()),
            ..cfg.clone()
        };
        run_experiment_with_data(&cfg, &ds).map_err(|e| e.to_string())?;
        files.push(std::fs::read(dir.path().join("metrics.csv")).unwrap());
    }
    check(
        files[0] == files[1],
        format!("{} byte CSVs {}", files[0].len(), if files[0] == files[1] { "identical" } else { "differ" }),
    )
}

/// CSV with the method column blanked, for comparing trajectories across methods.
fn trajectory(cfg: &TrainConfig, ds: &cavat::data::Dataset) -> Result<String, String> {
    let rec = run_experiment_with_data(cfg, ds).map_err(|e| e.to_string())?;
    let rows: Vec<CsvRow> = rec
        .rows()
        .map(|r| CsvRow {
            method: MethodId::Baseline,
            ..r.clone()
        })
        .collect();
    csv_string(&rows).map_err(|e| e.to_string())
}

fn criterion_10() -> Outcome {
    let base = TrainConfig {
        lambda: 0.0,
        ..short_config(MethodId::Baseline)
    };
    let ds = base.load_dataset().map_err(|e| e.to_string())?;
    let reference = trajectory(&base, &ds)?;
    let mut differing = Vec::new();
    for id in MethodId::ALL {
        let cfg = TrainConfig { method: id, ..base.clone() };
        if trajectory(&cfg, &ds)? != reference {
            differing.push(id.as_str());
        }
    }
    let vat = trajectory(
        &TrainConfig {
            gamma: 0.0,
            ..short_config(MethodId::Vat)
        },
        &ds,
    )?;
    let cavat = trajectory(
        &TrainConfig {
            gamma: 0.0,
            ..short_config(MethodId::Cavat)
        },
        &ds,
    )?;
    check(
        differing.is_empty() && vat == cavat,
        format!(
            "lambda=0 trajectories differing from baseline: {:?}; gamma=0 cavat {} vat",
            differing,
            if vat == cavat { "==" } else { "!=" }
        ),
    )
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        ("reinforce unbiasedness", criterion_1),
        ("gradient correctness", criterion_2),
        ("connectivity reward oracle", criterion_3),
        ("local necessity", criterion_4),
        ("metric oracles", criterion_5),
        ("kl properties", criterion_6),
        ("perturbation contract", criterion_7),
        ("end-to-end benchmark", criterion_8),
        ("determinism", criterion_9),
        ("weight-zero reductions", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !args.is_empty() && !args.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {n:>2} {name}: {detail} [{:.1?}]", start.elapsed());
    }
    if args.is_empty() || args.contains(&1) {
        let (r1, r2) = reinforce_variance_ratio();
        let ok = (5.0..20.0).contains(&r1) && (5.0..20.0).contains(&r2);
        if !ok {
            failed += 1;
        }
        println!(
            "{}  + reinforce variance: var(m=1)/var(m=10) = {r1:.2}, var(m=10)/var(m=100) = {r2:.2}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
