//! End-to-end acceptance checks. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::panic;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use asymnet_core::eval::{evaluate, topk_accuracy};
use asymnet_core::features::synth_generate;
use asymnet_core::gradcheck::{run_suite, CheckSizes, TOLERANCE};
use asymnet_core::ssn::ssn_forward;
use asymnet_core::trainer::{batch_for, encoder_gradients, two_step_train, GradientPath};
use asymnet_core::tree::{leaf_likelihood, posteriors, tree_forward};
use asymnet_core::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_ssn(rng: &mut Rng, hidden: usize, item: usize, fc1: usize) -> SsnParams {
    SsnParams::init(hidden, item, fc1, rng.uniform_in(0.1, 1.5), rng)
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn leaves(rng: &mut Rng, ssn: &SsnParams, n: usize) -> Vec<SsnOutput> {
    let item = normals(rng, ssn.item_dim());
    (0..n)
        .map(|_| ssn_forward(ssn, &normals(rng, ssn.hidden_dim()), &item).unwrap())
        .collect()
}

// ---------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let results = run_suite(0..20, &CheckSizes::default(), None).unwrap();
    let elapsed = start.elapsed();
    let table: Vec<String> = results
        .iter()
        .map(|r| format!("{}={:.2e}", r.component, r.max_relative_error))
        .collect();
    let pass = results.len() == 3 && results.iter().all(|r| r.max_relative_error < TOLERANCE) && elapsed < Duration::from_secs(60);
    outcome(pass, format!("20 seeds, {} in {:.1}s", table.join(" "), elapsed.as_secs_f64()))
}

fn sibling_sums(values: &[f64], branching: usize) -> impl Iterator<Item = f64> + '_ {
    values.chunks(branching).map(|c| c.iter().sum())
}

fn normalization_invariants() -> Outcome {
    let configs = [
        TreeConfig::default(),
        TreeConfig::flat(32),
        TreeConfig::binary(8),
        TreeConfig {
            leaf_count: 16,
            level_gate_counts: vec![16, 4],
            gate_bias: true,
        },
    ];
    let mut rng = Rng::seed_from_u64(2024);
    let mut violations = 0usize;
    let mut worst = 0.0f64;
    for pass in 0..10_000 {
        let cfg = configs[pass % configs.len()].clone();
        let ssn = random_ssn(&mut rng, 3, 3, 4);
        let outs = leaves(&mut rng, &ssn, cfg.leaf_count);
        let tree = FusionTree::init(cfg.clone(), 4, rng.uniform_in(0.0, 5.0), &mut rng).unwrap();
        let record = tree_forward(&tree, &outs).unwrap();
        let post = posteriors(&tree, &record, rng.below(2) == 0).unwrap();
        for l in 0..cfg.depth() {
            let b = cfg.branching(l);
            for s in sibling_sums(&record.gates[l], b).chain(sibling_sums(&post.posteriors[l], b)) {
                worst = worst.max((s - 1.0).abs());
                if (s - 1.0).abs() > 1e-9 {
                    violations += 1;
                }
            }
        }
        if !(record.y > 0.0 && record.y < 1.0) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("10000 passes, {violations} violations, worst |sum-1| = {worst:.1e}"))
}

/// Every level structure with `leaves` leaves: chains of strictly
/// decreasing divisors starting at the leaf count.
fn level_structures(leaves: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![vec![leaves]];
    while let Some(chain) = stack.pop() {
        let last = *chain.last().unwrap();
        for d in 1..last {
            if last % d == 0 {
                let mut next = chain.clone();
                next.push(d);
                stack.push(next);
            }
        }
        out.push(chain);
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut rng = Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut shapes = 0;
    for leaves_n in 1..=8 {
        for counts in level_structures(leaves_n) {
            shapes += 1;
            let cfg = TreeConfig {
                leaf_count: leaves_n,
                level_gate_counts: counts,
                gate_bias: true,
            };
            for _ in 0..1000 {
                let ssn = random_ssn(&mut rng, 3, 2, 3);
                let outs = leaves(&mut rng, &ssn, leaves_n);
                let tree = FusionTree::init(cfg.clone(), 3, rng.uniform_in(0.0, 4.0), &mut rng).unwrap();
                let record = tree_forward(&tree, &outs).unwrap();
                // Root-to-leaf gate products.
                let path: Vec<f64> = (0..leaves_n)
                    .map(|leaf| {
                        let mut k = leaf;
                        let mut w = 1.0;
                        for l in 0..cfg.depth() {
                            w *= record.gates[l][k];
                            k /= cfg.branching(l);
                        }
                        w
                    })
                    .collect();
                let y: f64 = path.iter().zip(&outs).map(|(w, o)| w * o.y_hat).sum();
                worst = worst.max((y - record.y).abs());
                for label in [true, false] {
                    let post = posteriors(&tree, &record, label).unwrap();
                    let joint: Vec<f64> = path
                        .iter()
                        .zip(&outs)
                        .map(|(w, o)| w * leaf_likelihood(o.y_hat, label))
                        .collect();
                    for l in 0..cfg.depth() {
                        let span = cfg.span(l);
                        let parent_span = span * cfg.branching(l);
                        for k in 0..cfg.level_gate_counts[l] {
                            let reach: f64 = joint[k * span..(k + 1) * span].iter().sum();
                            let p0 = k * span / parent_span * parent_span;
                            let parent: f64 = joint[p0..p0 + parent_span].iter().sum();
                            worst = worst.max((post.posteriors[l][k] - reach / parent).abs());
                        }
                    }
                }
            }
        }
    }
    outcome(worst < 1e-10, format!("{shapes} tree shapes x 1000 draws, max abs error {worst:.1e}"))
}

fn replication_equivalence() -> Outcome {
    // Exactness at toy sizes.
    let ds = synth_generate(&SynthConfig {
        n_traj: 6,
        gallery_size: 30,
        dim: 4,
        traj_len: 8,
        n_categories: 1,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let mc = ModelConfig {
        hidden_dim: 5,
        fc1_dim: 6,
        init_scale: 0.3,
        tree: TreeConfig::binary(8),
        ..ModelConfig::default()
    };
    let model = Model::init(&mc, 4, 5).unwrap();
    let mut worst = 0.0f64;
    let mut rng = Rng::seed_from_u64(9);
    for n in 1..=3 {
        for s in 1..=3 {
            let cfg = TrainConfig { n, s, ..TrainConfig::default() };
            let trajs: Vec<usize> = rng.sample_indices(ds.trajectories().len(), n);
            let batch = batch_for(&ds, &trajs, s, &mut rng).unwrap();
            let fast = encoder_gradients(&model, &ds, &batch, &cfg, GradientPath::Replicated).unwrap().flatten();
            let slow = encoder_gradients(&model, &ds, &batch, &cfg, GradientPath::Naive).unwrap().flatten();
            let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((a - b).abs() / scale.max(f64::MIN_POSITIVE));
            }
        }
    }

    // Wall clock at n = 4, S = 8, T = 32 with the default architecture.
    let ds = synth_generate(&SynthConfig {
        n_traj: 8,
        gallery_size: 64,
        n_categories: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = Model::init(&ModelConfig::default(), ds.dim(), 1).unwrap();
    let cfg = TrainConfig { n: 4, s: 8, ..TrainConfig::default() };
    let batch = batch_for(&ds, &[0, 1, 2, 3], cfg.s, &mut Rng::seed_from_u64(1)).unwrap();
    let time = |path| {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                encoder_gradients(&model, &ds, &batch, &cfg, path).unwrap();
                t.elapsed()
            })
            .min()
            .unwrap()
    };
    let replicated = time(GradientPath::Replicated);
    let naive = time(GradientPath::Naive);
    outcome(
        worst <= 1e-10 && replicated < naive,
        format!(
            "max rel diff {worst:.1e} (n,S <= 3); replicated {:.3}s vs naive {:.3}s",
            replicated.as_secs_f64(),
            naive.as_secs_f64()
        ),
    )
}

fn modes() -> [Scoring; 4] {
    [
        Scoring::Tree,
        Scoring::Baseline(Baseline::Avg),
        Scoring::Baseline(Baseline::Max),
        Scoring::Baseline(Baseline::Last),
    ]
}

fn report(model: &Model, ds: &Dataset, scoring: Scoring, reports: &mut Vec<EvalReport>) -> EvalReport {
    let r = evaluate(model, ds, &EvalOptions { scoring, ..EvalOptions::default() }).unwrap();
    reports.push(r.clone());
    r
}

fn synthetic_end_to_end(reports: &mut Vec<EvalReport>) -> Outcome {
    let start = Instant::now();
    let ds = synth_generate(&SynthConfig::default()).unwrap();
    let (train, held_out) = ds.split_holdout(0.2).unwrap();
    let mut model = Model::init(&ModelConfig::default(), ds.dim(), 1).unwrap();
    two_step_train(&mut model, &train, &TrainConfig::default(), |_| {}).unwrap();
    let r = report(&model, &held_out, Scoring::Tree, reports);
    let elapsed = start.elapsed();
    let (top1, top5) = (r.accuracy_at(1).unwrap(), r.accuracy_at(5).unwrap());
    outcome(
        top1 >= 90.0 && top5 >= 97.0 && elapsed < Duration::from_secs(300),
        format!(
            "held-out top-1 {top1:.1}% (need 90), top-5 {top5:.1}% (need 97), {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

const SPARSE_SEEDS: [u64; 5] = [7, 8, 9, 10, 11];

fn sparse_dataset(seed: u64) -> Dataset {
    synth_generate(&SynthConfig {
        n_traj: 200,
        gallery_size: 800,
        corrupt_fraction: 0.8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn sparse_model(ds: &Dataset, tree: TreeConfig, seed: u64) -> Model {
    let mc = ModelConfig { tree, ..ModelConfig::default() };
    let mut model = Model::init(&mc, ds.dim(), seed).unwrap();
    two_step_train(&mut model, ds, &TrainConfig { seed, ..TrainConfig::default() }, |_| {}).unwrap();
    model
}

/// Criteria on the sparse-evidence dataset share their training runs.
fn sparse_frames(reports: &mut Vec<EvalReport>) -> (Outcome, Outcome) {
    let mut ordering_wins = 0;
    let mut structure_wins = 0;
    let mut ordering_rows = Vec::new();
    let mut structure_rows = Vec::new();
    for seed in SPARSE_SEEDS {
        let ds = sparse_dataset(seed);
        let binary = sparse_model(&ds, TreeConfig::default(), seed);
        let top5: Vec<f64> = modes()
            .into_iter()
            .map(|m| report(&binary, &ds, m, reports).accuracy_at(5).unwrap())
            .collect();
        if top5[1..].iter().all(|&b| top5[0] >= b) {
            ordering_wins += 1;
        }
        ordering_rows.push(format!("seed {seed}: {:.1}/{:.1}/{:.1}/{:.1}", top5[0], top5[1], top5[2], top5[3]));

        let flat = sparse_model(&ds, TreeConfig::flat(ds.traj_len()), seed);
        let deep20 = report(&binary, &ds, Scoring::Tree, reports).accuracy_at(20).unwrap();
        let flat20 = report(&flat, &ds, Scoring::Tree, reports).accuracy_at(20).unwrap();
        if deep20 >= flat20 {
            structure_wins += 1;
        }
        structure_rows.push(format!("seed {seed}: {deep20:.1} vs {flat20:.1}"));
    }
    (
        outcome(
            ordering_wins >= 4,
            format!("{ordering_wins}/5 seeds; top-5 tree/avg/max/last {}", ordering_rows.join(", ")),
        ),
        outcome(
            structure_wins >= 4,
            format!("{structure_wins}/5 seeds; top-20 5-level vs flat {}", structure_rows.join(", ")),
        ),
    )
}

fn determinism_and_serialization(reports: &mut Vec<EvalReport>) -> Outcome {
    let ds = synth_generate(&SynthConfig {
        n_traj: 24,
        gallery_size: 96,
        dim: 8,
        traj_len: 8,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let mc = ModelConfig {
        hidden_dim: 12,
        fc1_dim: 16,
        tree: TreeConfig::binary(8),
        ..ModelConfig::default()
    };
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let mut model = Model::init(&mc, ds.dim(), 3).unwrap();
        two_step_train(&mut model, &ds, &cfg, |_| {}).unwrap();
        let path = dir.path().join(format!("run{run}.bin"));
        model.save(&path).unwrap();
        files.push((model, std::fs::read(&path).unwrap(), path));
    }
    for m in modes() {
        report(&files[0].0, &ds, m, reports);
    }
    let identical = files[0].1 == files[1].1;
    let reloaded = Model::load(&files[0].2).unwrap();
    let round_trip = reloaded == files[0].0 && reloaded.to_bytes() == files[0].1;
    outcome(
        identical && round_trip,
        format!("repeat runs identical: {identical}; load(save(m)) == m: {round_trip}"),
    )
}

fn metric_sanity(reports: &[EvalReport]) -> Outcome {
    let monotone = reports.iter().filter(|r| r.is_monotone()).count();
    let (g, k, queries) = (200, 20, 1000);
    let mut rng = Rng::seed_from_u64(99);
    let mut results = Vec::new();
    let mut truth = BTreeMap::new();
    for q in 0..queries {
        let scored = (0..g).map(|i| (format!("item{i:03}"), rng.uniform())).collect();
        results.push(RankedResult::from_scores(format!("q{q}"), scored));
        truth.insert(format!("q{q}"), BTreeSet::from([format!("item{:03}", rng.below(g))]));
    }
    let acc = topk_accuracy(&results, &truth, k).unwrap();
    let expected = 100.0 * k as f64 / g as f64;
    outcome(
        monotone == reports.len() && (acc - expected).abs() <= 3.0,
        format!(
            "{monotone}/{} reports monotone; random top-{k} of {g}: {acc:.1}% vs {expected:.1}%",
            reports.len()
        ),
    )
}

// ---------------------------------------------------------------------------

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(panic::AssertUnwindSafe(f));
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "{} {name}: {detail} [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    pass
}

const CRITERIA: [&str; 9] = [
    "gradient_fidelity",
    "normalization_invariants",
    "oracle_equivalence",
    "replication_equivalence",
    "synthetic_end_to_end",
    "sparse_frame_ordering",
    "tree_structure_trend",
    "determinism_and_serialization",
    "metric_sanity",
];

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        for name in CRITERIA {
            println!("{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));
    let mut reports = Vec::new();
    let mut ok = true;

    if wanted("gradient_fidelity") {
        ok &= run("gradient_fidelity", gradient_fidelity);
    }
    if wanted("normalization_invariants") {
        ok &= run("normalization_invariants", normalization_invariants);
    }
    if wanted("oracle_equivalence") {
        ok &= run("oracle_equivalence", oracle_equivalence);
    }
    if wanted("replication_equivalence") {
        ok &= run("replication_equivalence", replication_equivalence);
    }
    if wanted("synthetic_end_to_end") {
        ok &= run("synthetic_end_to_end", || synthetic_end_to_end(&mut reports));
    }
    if wanted("sparse_frame_ordering") || wanted("tree_structure_trend") {
        let mut pair = None;
        ok &= run("sparse_frame_ordering", || {
            let (a, b) = sparse_frames(&mut reports);
            pair = Some(b);
            a
        });
        ok &= run("tree_structure_trend", || {
            pair.unwrap_or_else(|| outcome(false, "training runs did not complete"))
        });
    }
    if wanted("determinism_and_serialization") {
        ok &= run("determinism_and_serialization", || determinism_and_serialization(&mut reports));
    }
    if wanted("metric_sanity") {
        ok &= run("metric_sanity", || metric_sanity(&reports));
    }

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
