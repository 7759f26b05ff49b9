//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.
//!
//! `ZOO_ACCEPTANCE=1,3,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zoo_cli::config::CampaignConfig;
use zoo_cli::report::CampaignReport;
use zoo_cli::{cmd_attack, cmd_train};
use zoo_core::attackspace::{AttackSpace, Stage};
use zoo_core::dataset::load_idx;
use zoo_core::estimator::{estimate_gradient, FnObjective};
use zoo_core::loss::AttackGoal;
use zoo_core::model::{accuracy, Layer, Network};
use zoo_core::numerics::Tensor;
use zoo_core::optimizer::{
    adam_coordinate_update, binary_search_c, minimize, solve, solve_observed, AdamState, AttackResult, SolverConfig, SolverKind,
};
use zoo_core::oracle::{NetworkOracle, Oracle};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_settings(extra: &[(&str, &str)]) -> BTreeMap<String, String> {
    let data = repo().join("data");
    let p = |s: &str| data.join(s).display().to_string();
    let mut m: BTreeMap<String, String> = [
        ("train_images", p("mnist/train-images-idx3-ubyte")),
        ("train_labels", p("mnist/train-labels-idx1-ubyte")),
        ("test_images", p("mnist/t10k-images-idx3-ubyte")),
        ("test_labels", p("mnist/t10k-labels-idx1-ubyte")),
        ("model", p("models/mnist-mlp.zoo")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    for (k, v) in extra {
        m.insert(k.to_string(), v.to_string());
    }
    m
}

/// The checked-in MNIST model, retrained from the default config if absent.
fn mnist_model() -> Network {
    let cfg = CampaignConfig::from_settings(&mnist_settings(&[])).unwrap();
    if !cfg.model.is_file() {
        println!("  training the MNIST model ({} missing)", cfg.model.display());
        cmd_train(&cfg).unwrap();
    }
    Network::load(&cfg.model).unwrap()
}

fn temp_output() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

/// Every attack's estimator queries equal 2·B·iterations, the itemized
/// ledger adds up, and the oracle counter agrees.
fn ledger_violations(report: &CampaignReport) -> usize {
    report
        .attacks
        .iter()
        .filter(|r| {
            let q = &r.queries;
            q.estimator != 2 * r.batch as u64 * r.iterations as u64
                || q.total != q.estimator + q.initial + q.iterate + q.stage
                || q.total != q.oracle
        })
        .count()
}

fn result_ledger_ok(r: &AttackResult, oracle_spent: u64) -> bool {
    r.queries.estimator == 2 * r.batch as u64 * r.iterations as u64 && r.total_queries() == oracle_spent
}

fn c1_estimator_order() -> Verdict {
    let started = Instant::now();
    let f = FnObjective(|x: &Tensor| x.data().iter().map(|v| v.sin() * v * v).sum::<f64>());
    let exact = |v: f64| v.cos() * v * v + 2.0 * v * v.sin();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let indices: Vec<usize> = (0..50).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = Tensor::from_slice(&(0..50).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>());
        let err = |h: f64| {
            estimate_gradient(&f, &x, &indices, h)
                .unwrap()
                .iter()
                .map(|e| (e.grad - exact(x.data()[e.index])).abs())
                .fold(0.0, f64::max)
        };
        worst = worst.max(err(1e-3) / err(1e-2));
    }
    let elapsed = started.elapsed();
    verdict(
        worst <= 1.0 / 50.0 && elapsed < Duration::from_secs(1),
        format!("worst err(1e-3)/err(1e-2) = {worst:.5} (≤ 0.02; O(h²) gives 0.01) over 20 points, {elapsed:.2?}"),
    )
}

fn c2_quadratic() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut newton_worst: f64 = 0.0;
    let mut adam_worst: f64 = 0.0;
    for trial in 0..10 {
        let n = if trial % 2 == 0 { 10 } else { 25 };
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
        // Within ±0.5 of the start: at η = 0.01 each of 10 coordinates gets
        // about 200 updates of at most η, so the optimum must be reachable.
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (a2, b2) = (a.clone(), b.clone());
        let f = FnObjective(move |x: &Tensor| {
            x.data()
                .iter()
                .zip(a2.iter().zip(&b2))
                .map(|(xi, (ai, bi))| ai * (xi - bi) * (xi - bi))
                .sum::<f64>()
        });
        let newton = SolverConfig {
            solver: SolverKind::Newton,
            step_size: 1.0,
            batch: n,
            max_iterations: 1,
            patience: None,
            h: 1e-3,
            ..SolverConfig::default()
        };
        let r = minimize(&f, Tensor::zeros(&[n]), &newton, &mut rng).unwrap();
        let dist = r.x.data().iter().zip(&b).map(|(x, b)| (x - b).abs()).fold(0.0, f64::max);
        newton_worst = newton_worst.max(dist.max(r.value));

        if n == 10 {
            let adam = SolverConfig {
                step_size: 0.01,
                batch: 1,
                max_iterations: 2000,
                patience: None,
                ..SolverConfig::default()
            };
            let r = minimize(&f, Tensor::zeros(&[n]), &adam, &mut rng).unwrap();
            adam_worst = adam_worst.max(r.value);
        }
    }
    let elapsed = started.elapsed();
    verdict(
        newton_worst <= 1e-8 && adam_worst <= 1e-3 && elapsed < Duration::from_secs(5),
        format!(
            "Newton one pass: max(|x−x*|∞, f−f*) = {newton_worst:.2e}; ADAM 2000 its: f−f* = {adam_worst:.2e}; {elapsed:.2?}"
        ),
    )
}

fn c3_adam_sign() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eta = 0.01;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        // |g| log-uniform in [1e-2, 1e2]: the ε-term bounds the gap by η·ε/|g|.
        let mag = 10f64.powf(rng.gen_range(-2.0..2.0));
        let g = if rng.gen_bool(0.5) { mag } else { -mag };
        let mut s = AdamState::new(1);
        let d = adam_coordinate_update(&mut s, 0, g, eta).unwrap();
        worst = worst.max((d + eta * g.signum()).abs() / eta);
    }
    verdict(worst <= 1e-6, format!("max |δ + η·sign(g)|/η = {worst:.2e}"))
}

fn check_mnist_model(net: &Network) -> (bool, f64) {
    let d = repo().join("data/mnist");
    let test = load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"), 10).unwrap();
    let acc = accuracy(net, &test).unwrap();
    (acc >= 0.97, acc)
}

fn run_campaign(extra: &[(&str, &str)]) -> (CampaignReport, Duration, tempfile::TempDir) {
    let out = temp_output();
    let dir = out.path().display().to_string();
    let mut all = extra.to_vec();
    all.push(("output_dir", &dir));
    let cfg = CampaignConfig::from_settings(&mnist_settings(&all)).unwrap();
    let started = Instant::now();
    let report = cmd_attack(&cfg, &mut |_| {}).unwrap();
    (report, started.elapsed(), out)
}

fn c4_mnist_untargeted(net: &Network, ledgers: &mut Vec<String>) -> Verdict {
    let (ok, acc) = check_mnist_model(net);
    let (report, elapsed, _out) = run_campaign(&[("mode", "untargeted"), ("n_images", "50"), ("seed", "4")]);
    let s = &report.summary;
    let rate = s.success_rate.unwrap_or(0.0);
    let l2 = s.mean_l2.unwrap_or(f64::INFINITY);
    ledgers.push(format!("c4: {} violations in {} attacks", ledger_violations(&report), s.attacks));
    verdict(
        ok && s.attacks == 50 && rate >= 0.95 && l2 <= 4.0 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "model test acc {acc:.4}; {} attacks, success {:.1} %, mean L2 {l2:.4}, {elapsed:.1?}",
            s.attacks,
            rate * 100.0
        ),
    )
}

fn c5_mnist_targeted(ledgers: &mut Vec<String>) -> Verdict {
    let (report, elapsed, _out) = run_campaign(&[("mode", "targeted"), ("n_images", "10"), ("seed", "5")]);
    let s = &report.summary;
    let rate = s.success_rate.unwrap_or(0.0);
    let search_ok = report.config["c0"] == "0.01" && report.config["search_steps"] == "9";
    ledgers.push(format!("c5: {} violations in {} attacks", ledger_violations(&report), s.attacks));
    verdict(
        search_ok && s.attacks == 90 && rate >= 0.85 && elapsed < Duration::from_secs(90 * 60),
        format!(
            "{} attacks (10 images × 9 targets), success {:.1} %, mean L2 {:.4}, {elapsed:.1?}",
            s.attacks,
            rate * 100.0,
            s.mean_l2.unwrap_or(f64::NAN)
        ),
    )
}

fn c6_ledger(ledgers: &[String], extra_ok: bool) -> Verdict {
    let clean = ledgers.iter().all(|l| l.contains(": 0 violations"));
    verdict(clean && extra_ok, format!("{}; hierarchical runs reconcile: {extra_ok}", ledgers.join("; ")))
}

/// Two-class 64×64×1 detector: class 1 wins once the image correlates with
/// a period-6 vertical stripe pattern by more than `THRESHOLD`. A 16×16
/// bilinear grid cannot express period-6 stripes; a 32×32 grid can.
const SIDE: usize = 64;
const PERIOD: f64 = 6.0;
const THRESHOLD: f64 = 400.0;
const SCALE: f64 = 0.05;

fn stripe_detector() -> Network {
    let n = SIDE * SIDE;
    let stripe: Vec<f64> = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * (i % SIDE) as f64 / PERIOD).cos() * SCALE)
        .collect();
    let mut weights = vec![0.0; n];
    weights.extend(stripe);
    Network::new(
        vec![SIDE, SIDE, 1],
        vec![
            Layer::Flatten,
            Layer::Dense {
                weights: Tensor::new(vec![2, n], weights).unwrap(),
                bias: Tensor::from_slice(&[0.0, -SCALE * THRESHOLD]),
            },
        ],
        2,
    )
    .unwrap()
}

/// Smooth gray image; only low frequencies, so it carries no stripe signal.
fn smooth_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, p, q) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let data = (0..SIDE * SIDE)
        .map(|i| {
            let (r, c) = ((i / SIDE) as f64 / SIDE as f64, (i % SIDE) as f64 / SIDE as f64);
            0.5 + a * (3.0 * r + p).sin() + b * (2.0 * c + q).cos()
        })
        .collect();
    Tensor::new(vec![SIDE, SIDE, 1], data).unwrap()
}

fn c7_hierarchical() -> (Verdict, bool) {
    let net = stripe_detector();
    let oracle = NetworkOracle::new(net.clone());
    let cfg = SolverConfig {
        step_size: 0.01,
        max_iterations: 1000,
        patience: None,
        ..SolverConfig::hierarchical()
    };
    let c = 10.0;
    let goal = AttackGoal::targeted(1);
    let fixed = AttackSpace::new(&[SIDE, SIDE, 1], vec![Stage::new(16, 16, 0)], None).unwrap();
    let staged = AttackSpace::new(&[SIDE, SIDE, 1], vec![Stage::new(16, 16, 0), Stage::new(32, 32, 500)], Some(1)).unwrap();

    let mut continuity: Vec<f64> = Vec::new();
    let mut fixed_failed = 0;
    let mut staged_won = 0;
    let mut ledger_ok = true;
    for seed in 0..5u64 {
        let x0 = smooth_image(100 + seed);
        assert_eq!(net.predict(&x0).unwrap(), 0);
        let run = |space: &AttackSpace| {
            let before = oracle.total_queries();
            let r = solve(&x0, &goal, c, &cfg, space, &oracle, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let spent = oracle.total_queries() - before;
            (r, spent)
        };
        let (f, spent_f) = run(&fixed);
        let (h, spent_h) = run(&staged);
        ledger_ok &= result_ledger_ok(&f, spent_f) && result_ledger_ok(&h, spent_h) && h.queries.stage == 1;
        if !f.success {
            fixed_failed += 1;
            if h.success {
                staged_won += 1;
            }
        }
        for s in &h.stage_switches {
            continuity.push((s.loss_after - s.loss_before).abs() / s.loss_before.abs());
        }
    }
    let worst = continuity.iter().cloned().fold(0.0, f64::max);
    let pass = continuity.len() == 5 && worst <= 0.10 && fixed_failed == 5 && staged_won >= 3;
    (
        verdict(
            pass,
            format!(
                "(a) worst |Δloss|/loss at 16²→32² switch = {:.2} % over {} switches; (b) fixed 16² failed {fixed_failed}/5, hierarchical succeeded on {staged_won} of those",
                worst * 100.0,
                continuity.len()
            ),
        ),
        ledger_ok,
    )
}

/// `(image, target)` pairs: first correctly classified test images in file
/// order, target one class up.
fn targeted_pairs(net: &Network, count: usize) -> Vec<(Tensor, usize)> {
    let d = repo().join("data/mnist");
    let test = load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"), 10).unwrap();
    test.into_iter()
        .filter(|s| net.predict(&s.image).unwrap() == s.label)
        .take(count)
        .map(|s| (s.image, (s.label + 1) % 10))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c8_adam_reset(net: &Network) -> Verdict {
    let oracle = NetworkOracle::new(net.clone());
    let space = AttackSpace::full(&[28, 28, 1]).unwrap();
    let pairs = targeted_pairs(net, 10);
    let mut finals = [Vec::new(), Vec::new()];
    let mut successes = [0, 0];
    for (k, reset) in [true, false].into_iter().enumerate() {
        let cfg = SolverConfig {
            reset_adam_on_first_success: reset,
            ..SolverConfig::default()
        };
        for (i, (x0, t)) in pairs.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(800 + i as u64);
            let r = binary_search_c(x0, &AttackGoal::targeted(*t), &cfg, &space, &oracle, &mut rng, 0.01, 9).unwrap();
            successes[k] += r.success as usize;
            finals[k].push(if r.success { r.l2_distortion } else { f64::INFINITY });
        }
    }
    let (with, without) = (median(finals[0].clone()), median(finals[1].clone()));
    let wins = finals[0].iter().zip(&finals[1]).filter(|(a, b)| a < b).count();
    verdict(
        with <= without,
        format!(
            "median final L2 with reset {with:.6} ({}/10 succeeded), without {without:.6} ({}/10); reset lower on {wins}/10 pairs",
            successes[0], successes[1]
        ),
    )
}

fn c9_importance() -> Verdict {
    let net = stripe_detector();
    let oracle = NetworkOracle::new(net);
    let cfg = SolverConfig {
        step_size: 0.01,
        max_iterations: 1000,
        patience: None,
        ..SolverConfig::hierarchical()
    };
    // Importance from the first stage so the whole attack is observed.
    let space = AttackSpace::new(&[SIDE, SIDE, 1], vec![Stage::new(16, 16, 0), Stage::new(32, 32, 500)], Some(0)).unwrap();
    let x0 = smooth_image(9);
    let mut updates = 0;
    let mut worst_sum: f64 = 0.0;
    let mut min_entry = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    solve_observed(&x0, &AttackGoal::targeted(1), 10.0, &cfg, &space, &oracle, &mut rng, &mut |s| {
        let p = s.importance().probs();
        updates += 1;
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        min_entry = min_entry.min(p.iter().cloned().fold(f64::INFINITY, f64::min));
    })
    .unwrap();

    // Concentrated Δx: one 16×16 block of the 64×64 image.
    let mut hot = Tensor::zeros(&[SIDE, SIDE, 1]);
    for r in 8..24 {
        for c in 40..56 {
            hot.data_mut()[r * SIDE + c] = 0.3;
        }
    }
    let mut grid = AttackSpace::new(&[SIDE, SIDE, 1], vec![Stage::new(32, 32, 0)], Some(0)).unwrap();
    let m = grid.update_importance(&hot).unwrap();
    // The block covers rows/cols 4..12 and 20..28 of the 32×32 grid.
    let region: f64 = (4..12)
        .flat_map(|r| (20..28).map(move |c| r * 32 + c))
        .map(|i| m.probs()[i])
        .sum();
    let uniform = 64.0 / 1024.0;
    let pass = worst_sum <= 1e-9 && min_entry > 0.0 && region > uniform && updates > 1000;
    verdict(
        pass,
        format!(
            "{updates} map refreshes during a 1000-iteration attack: max |Σp−1| = {worst_sum:.1e}, min p = {min_entry:.1e}; hot-region mass {region:.3} vs uniform {uniform:.3}"
        ),
    )
}

fn c10_determinism() -> Verdict {
    let extra = [("n_images", "2"), ("iterations", "200"), ("search_steps", "3"), ("seed", "10")];
    let (_, _, a) = run_campaign(&extra);
    let (_, _, b) = run_campaign(&extra);
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("report.json")).unwrap();
    let (ra, rb) = (read(&a), read(&b));
    verdict(ra == rb && !ra.is_empty(), format!("report.json: {} bytes, identical: {}", ra.len(), ra == rb))
}

fn timed(n: usize, name: &'static str, f: impl FnOnce() -> Verdict) -> (usize, &'static str, Verdict) {
    let start = Instant::now();
    let v = f();
    eprintln!("criterion {n} finished in {:.1} s", start.elapsed().as_secs_f64());
    (n, name, v)
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ZOO_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut ledgers = Vec::new();
    let mut hierarchical_ledger = true;

    if want(1) {
        results.push(timed(1, "estimator order", c1_estimator_order));
    }
    if want(2) {
        results.push(timed(2, "quadratic oracle equivalence", c2_quadratic));
    }
    if want(3) {
        results.push(timed(3, "ADAM first-step sign", c3_adam_sign));
    }
    let net = (want(4) || want(8)).then(mnist_model);
    if want(4) {
        results.push(timed(4, "MNIST untargeted", || c4_mnist_untargeted(net.as_ref().unwrap(), &mut ledgers)));
    }
    if want(5) {
        results.push(timed(5, "MNIST targeted", || c5_mnist_targeted(&mut ledgers)));
    }
    if want(7) || want(6) {
        let start = Instant::now();
        let (v, ok) = c7_hierarchical();
        eprintln!("criterion 7 finished in {:.1} s", start.elapsed().as_secs_f64());
        hierarchical_ledger = ok;
        if want(7) {
            results.push((7, "hierarchical continuity", v));
        }
    }
    if want(6) {
        results.push(timed(6, "query ledger", || c6_ledger(&ledgers, hierarchical_ledger)));
    }
    if want(8) {
        results.push(timed(8, "ADAM reset effect", || c8_adam_reset(net.as_ref().unwrap())));
    }
    if want(9) {
        results.push(timed(9, "importance map validity", c9_importance));
    }
    if want(10) {
        results.push(timed(10, "determinism", c10_determinism));
    }

    results.sort_by_key(|(n, _, _)| *n);
    let mut failed = 0;
    for (n, name, v) in &results {
        println!("criterion {n:>2} {name:<30} {}  {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += (!v.pass) as usize;
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
