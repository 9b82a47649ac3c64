//! Acceptance criteria A1–A9. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. All tolerances are pinned below.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dropsel::adversarial::{attack_rows, build_mixed_set, AttackConfig, AttackTrace, MixMode};
use dropsel::datasets::{make_blobs, BlobSpec};
use dropsel::metrics::{
    dsa, kl_score, lsa_detailed, max_p, score_inputs, var_score, var_weighted, BandwidthRule, KdeConfig, MetricId,
    ScoreRequest, ScoreVector, SurpriseReference,
};
use dropsel::selection::{rank_inputs, retrain_loop, RetrainConfig, SelectionPolicy};
use dropsel::stats::{
    correlation_report, decile_curve, distance_correlation, kendall_tau_b, pearson, CorrectnessVector,
};
use dropsel::tensor::{child_rng, median, seeded_shuffle, softmax};
use dropsel::{Dataset, Matrix, MlpModel, ProbTensor};
use rand::Rng;

/// Hand computations (A1).
const TOL_HAND: f64 = 1e-9;
/// Hand values that pass through f32 storage (A1).
const TOL_F32: f64 = 1e-7;
/// Pair-counting oracles (A1, A8 Kendall).
const TOL_PAIRS: f64 = 1e-12;
/// Softmax against high-precision values (A1).
const TOL_SOFTMAX: f64 = 1e-6;
/// Distance correlation and DSA against naive oracles (A8).
const TOL_NAIVE: f64 = 1e-9;
/// Minimum |median τ| for the uncertainty metrics (A2).
const MIN_TAU: f64 = 0.15;
/// Minimum decile rank agreement (A3).
const MIN_SPEARMAN: f64 = 0.8;
/// Required relative gain over random selection (A6).
const MIN_GAIN_RATIO: f64 = 1.2;
/// Mid-budget iteration of the 9-iteration desk loop: 2,000 of 4,000 added items (A6).
const MID_BUDGET_ITERATION: usize = 4;
/// Gradient check: step, points and maximum relative error (A9).
const FD_STEP: f64 = 1e-3;
const FD_POINTS: usize = 20;
const MAX_GRAD_REL_ERR: f64 = 1e-2;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const K: usize = 50;

struct Verdict {
    pass: bool,
    detail: String,
}

type Check<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn main() {
    let desk = DeskRuns::new();
    let checks: Vec<Check> = vec![
        ("A1 metric unit oracles", Box::new(a1)),
        ("A2 correlation direction and magnitude", Box::new(|| a2(&desk))),
        ("A3 decile monotonicity", Box::new(|| a3(&desk))),
        ("A4 adversarial mix strengthens correlation", Box::new(|| a4(&desk))),
        ("A5 adversarial-only breakdown", Box::new(|| a5(&desk))),
        ("A6 retraining gain", Box::new(a6)),
        ("A7 determinism and concurrency", Box::new(a7)),
        ("A8 oracle equivalence", Box::new(a8)),
        ("A9 gradient check", Box::new(|| a9(&desk))),
    ];
    let mut failed = 0;
    for (name, check) in &checks {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "{} {name} [{:.1}s]: {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- desk runs

struct SeedRun {
    splits: dropsel::datasets::BlobSplits,
    model: MlpModel,
    reference: SurpriseReference,
    /// Kendall τ per metric on the real test split.
    real_tau: BTreeMap<MetricId, Option<f64>>,
    test_scores: Vec<ScoreVector>,
    test_correct: CorrectnessVector,
}

struct DeskRuns {
    seeds: Vec<SeedRun>,
}

fn taus(
    model: &MlpModel,
    x: &Matrix,
    labels: &[usize],
    r: &SurpriseReference,
    seed: u64,
) -> (Vec<ScoreVector>, CorrectnessVector, BTreeMap<MetricId, Option<f64>>) {
    let scored = score_inputs(
        model,
        x,
        &ScoreRequest {
            metrics: &MetricId::ALL,
            k: K,
            seed,
            reference: Some(r),
        },
    )
    .unwrap();
    let correct = CorrectnessVector::from_predictions(&scored.predictions, labels).unwrap();
    let scores: Vec<ScoreVector> = MetricId::ALL.iter().map(|m| scored.get(*m).unwrap().clone()).collect();
    let refs: Vec<&ScoreVector> = scores.iter().collect();
    let report = correlation_report(&refs, &correct).unwrap();
    let tau = report.metrics.iter().map(|c| (c.metric, c.kendall)).collect();
    (scores, correct, tau)
}

impl DeskRuns {
    fn new() -> Self {
        let seeds = SEEDS
            .iter()
            .map(|&seed| {
                let (splits, model) = common::desk(seed);
                let reference =
                    SurpriseReference::build(&model, &splits.train().unwrap().features, &KdeConfig::default()).unwrap();
                let test = splits.test().unwrap();
                let (test_scores, test_correct, real_tau) =
                    taus(&model, &test.features, &test.labels, &reference, seed);
                SeedRun {
                    splits,
                    model,
                    reference,
                    real_tau,
                    test_scores,
                    test_correct,
                }
            })
            .collect();
        DeskRuns { seeds }
    }

    fn median_abs_tau(&self, per_seed: &[BTreeMap<MetricId, Option<f64>>], m: MetricId) -> f64 {
        let v: Vec<f64> = per_seed.iter().map(|t| t[&m].map_or(0.0, f64::abs)).collect();
        median(&v).unwrap()
    }

    fn real_taus(&self) -> Vec<BTreeMap<MetricId, Option<f64>>> {
        self.seeds.iter().map(|s| s.real_tau.clone()).collect()
    }
}

fn median_signed(per_seed: &[BTreeMap<MetricId, Option<f64>>], m: MetricId) -> f64 {
    let v: Vec<f64> = per_seed.iter().map(|t| t[&m].unwrap_or(0.0)).collect();
    median(&v).unwrap()
}

/// Correctly classified test rows in the seeded attack order.
fn attack_targets(run: &SeedRun, seed: u64, n: usize) -> Vec<usize> {
    let test = run.splits.test().unwrap();
    let pred = run.model.predict(&test.features).unwrap();
    seeded_shuffle(test.len(), &mut child_rng(seed, "attack-pick", 0))
        .into_iter()
        .filter(|&i| pred[i] == test.labels[i])
        .take(n)
        .collect()
}

// ---------------------------------------------------------------------- A1

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn one_hot_tensor(rows: &[&[f32]]) -> ProbTensor {
    let c = rows[0].len();
    ProbTensor::new(rows.len(), 1, c, rows.concat()).unwrap()
}

fn a1() -> Verdict {
    let mut failures = Vec::new();
    let mut total = 0;
    let mut check = |name: &str, ok: bool| {
        total += 1;
        if !ok {
            failures.push(name.to_string());
        }
    };

    let s = softmax(&[1.0, 2.0, 3.0]).unwrap();
    let hp = [
        0.090_030_573_170_380_46,
        0.244_728_471_054_797_64,
        0.665_240_955_774_821_9,
    ];
    check(
        "softmax [1,2,3]",
        s.iter().zip(hp).all(|(a, b)| close(f64::from(*a), b, TOL_SOFTMAX)),
    );

    let p = Matrix::new(
        3,
        3,
        vec![1.0, 0.0, 0.0, 0.7, 0.2, 0.1, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    )
    .unwrap();
    let mp = max_p(&p).unwrap();
    check(
        "MaxP examples",
        close(mp.values[0], 1.0, TOL_HAND) && close(mp.values[1], 0.7, TOL_F32),
    );

    let opposed = one_hot_tensor(&[&[1.0, 0.0], &[0.0, 1.0]]);
    check(
        "Var k=2 opposed one-hot = 0.25",
        close(var_score(&opposed).unwrap().values[0], 0.25, TOL_HAND),
    );
    let half = Matrix::new(1, 2, vec![0.5, 0.5]).unwrap();
    check(
        "VarW 0.25 / 0.5 = 0.5",
        close(var_weighted(&opposed, &half).unwrap().values[0], 0.5, TOL_HAND),
    );

    let mut unanimous = vec![0.0f32; 10 * 10];
    for j in 0..10 {
        unanimous[j * 10 + 3] = 1.0;
    }
    let t = ProbTensor::new(10, 1, 10, unanimous).unwrap();
    check(
        "KL unanimous C=10 = ln 10",
        close(kl_score(&t).unwrap().values[0], 10f64.ln(), TOL_HAND),
    );
    let votes = one_hot_tensor(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let kl31 = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
    check(
        "KL 3:1 votes",
        close(kl_score(&votes).unwrap().values[0], kl31, TOL_HAND),
    );

    let h = 0.5;
    let cfg = KdeConfig {
        bandwidth: BandwidthRule::Fixed(h),
        ..KdeConfig::default()
    };
    let out = lsa_detailed(
        &Matrix::new(2, 1, vec![0.0, 1.0]).unwrap(),
        &Matrix::new(1, 1, vec![0.25]).unwrap(),
        &cfg,
    )
    .unwrap();
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    check(
        "LSA two-point density",
        close(out.density[0], 0.5 * (phi(0.5) + phi(1.5)) / h, TOL_HAND),
    );

    let train = Matrix::new(3, 1, vec![2.0, 1.0, 5.0]).unwrap();
    let d = dsa(&train, &[0, 1, 0], &Matrix::new(1, 1, vec![0.0]).unwrap(), &[0]).unwrap();
    check("DSA 2/1 = 2", d.per_input[0].is_ok_and(|v| close(v, 2.0, TOL_HAND)));

    check(
        "Kendall concordant",
        close(
            kendall_tau_b(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            1.0,
            TOL_PAIRS,
        ),
    );
    check(
        "Kendall discordant",
        close(
            kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            TOL_PAIRS,
        ),
    );
    let mut rng = child_rng(1, "a1-kendall", 0);
    let x: Vec<f64> = (0..100).map(|_| f64::from(rng.gen_range(0..20u8))).collect();
    let y: Vec<f64> = (0..100).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    check(
        "Kendall vs pair counting",
        close(kendall_tau_b(&x, &y).unwrap(), kendall_oracle(&x, &y), TOL_PAIRS),
    );

    let xs: Vec<f64> = (0..10).map(f64::from).collect();
    let lin: Vec<f64> = xs.iter().map(|v| 2.0 * v + 1.0).collect();
    let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
    check("Pearson y=2x+1", close(pearson(&xs, &lin).unwrap(), 1.0, TOL_HAND));
    check("Pearson y=-x", close(pearson(&xs, &neg).unwrap(), -1.0, TOL_HAND));
    check(
        "dCor y=x",
        close(distance_correlation(&xs, &xs).unwrap(), 1.0, TOL_HAND),
    );

    // 10% lowest-MaxP inputs are exactly the misclassified ones.
    let n = 100;
    let sv = ScoreVector::new(
        MetricId::MaxP,
        (0..n).map(|i| 0.2 + 0.7 * i as f64 / n as f64).collect(),
    )
    .unwrap();
    let correct = CorrectnessVector((0..n).map(|i| i >= n / 10).collect());
    let curve = decile_curve(&sv, &correct).unwrap();
    let closed: Vec<f64> = (0..10).map(|i| i as f64 / (i + 1) as f64).collect();
    check(
        "decile closed form",
        curve
            .cumulative_accuracy
            .iter()
            .zip(&closed)
            .all(|(a, b)| close(*a, *b, TOL_HAND)),
    );

    let var = ScoreVector::new(MetricId::Var, vec![0.1, 0.5, 0.5]).unwrap();
    let tie = ScoreVector::new(MetricId::MaxP, vec![0.9, 0.8, 0.3]).unwrap();
    check("rank Var tie MaxP", rank_inputs(&var, Some(&tie)).unwrap() == [2, 1, 0]);

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{total} oracle examples within 1e-9 (hand), 1e-12 (pairs), 1e-6 (softmax)")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------------- A2

fn fmt_taus(per_seed: &[BTreeMap<MetricId, Option<f64>>]) -> String {
    MetricId::ALL
        .iter()
        .map(|&m| format!("{m} {:+.3}", median_signed(per_seed, m)))
        .collect::<Vec<_>>()
        .join(", ")
}

fn a2(desk: &DeskRuns) -> Verdict {
    let real = desk.real_taus();
    let med = |m| median_signed(&real, m);
    let directions = med(MetricId::KL) >= MIN_TAU
        && med(MetricId::MaxP) >= MIN_TAU
        && med(MetricId::Var) <= -MIN_TAU
        && med(MetricId::VarW) <= -MIN_TAU;
    let weakest = MetricId::UNCERTAINTY
        .iter()
        .map(|&m| med(m).abs())
        .fold(f64::INFINITY, f64::min);
    let lsa_ok = med(MetricId::LSA).abs() < weakest;
    let dsa_ok = med(MetricId::DSA).abs() < weakest;
    let acc: Vec<String> = desk
        .seeds
        .iter()
        .map(|s| format!("{:.3}", s.test_correct.accuracy().unwrap()))
        .collect();
    verdict(
        directions && lsa_ok && dsa_ok,
        format!(
            "median τ over 5 seeds: {}; directions {} (|τ| ≥ {MIN_TAU}), |LSA| < min {} , |DSA| < min {} (min uncertainty |τ| {weakest:.3}); accuracy {}",
            fmt_taus(&real),
            ok(directions),
            ok(lsa_ok),
            ok(dsa_ok),
            acc.join("/")
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "NOT MET"
    }
}

// ---------------------------------------------------------------------- A3

/// Spearman correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    pearson(&ranks(x), &ranks(y)).unwrap_or(0.0)
}

fn a3(desk: &DeskRuns) -> Verdict {
    let mut worst = f64::INFINITY;
    let mut worst_at = String::new();
    let mut endpoint_ok = true;
    for (seed, run) in SEEDS.iter().zip(&desk.seeds) {
        let acc = run.test_correct.accuracy().unwrap();
        for m in MetricId::UNCERTAINTY {
            let sv = run.test_scores.iter().find(|s| s.metric == m).unwrap();
            let curve = decile_curve(sv, &run.test_correct).unwrap();
            let deciles: Vec<f64> = (1..=10).map(f64::from).collect();
            let rho = spearman(&deciles, &curve.cumulative_accuracy);
            if rho < worst {
                worst = rho;
                worst_at = format!("{m} seed {seed}");
            }
            endpoint_ok &= *curve.cumulative_accuracy.last().unwrap() == acc;
        }
    }
    verdict(
        worst >= MIN_SPEARMAN && endpoint_ok,
        format!(
            "minimum Spearman {worst:.3} ({worst_at}) over 4 metrics × 5 seeds (≥ {MIN_SPEARMAN}); final point equals accuracy exactly: {}",
            ok(endpoint_ok)
        ),
    )
}

// ------------------------------------------------------------------- A4, A5

fn attack_traces(run: &SeedRun, seed: u64, n: usize) -> Vec<AttackTrace> {
    let test = run.splits.test().unwrap();
    attack_rows(
        &run.model,
        test,
        &attack_targets(run, seed, n),
        &AttackConfig::default(),
    )
    .unwrap()
}

fn a4(desk: &DeskRuns) -> Verdict {
    let real = desk.real_taus();
    let mut mixed_taus = Vec::new();
    let mut n_adv = Vec::new();
    for (&seed, run) in SEEDS.iter().zip(&desk.seeds) {
        let test = run.splits.test().unwrap();
        let traces = attack_traces(run, seed, test.len() / 2);
        let (mixed, _) = build_mixed_set(test, &traces, MixMode::FinalOnly).unwrap();
        n_adv.push(mixed.n_adversarial().to_string());
        mixed_taus.push(taus(&run.model, &mixed.inputs, &mixed.labels, &run.reference, seed).2);
    }
    let mut parts = Vec::new();
    let mut all = true;
    for m in MetricId::UNCERTAINTY {
        let (a, b) = (desk.median_abs_tau(&real, m), desk.median_abs_tau(&mixed_taus, m));
        all &= b > a;
        parts.push(format!("{m} {a:.3}→{b:.3}"));
    }
    verdict(
        all,
        format!(
            "median |τ| real→mixed: {}; adversarial rows per seed {}",
            parts.join(", "),
            n_adv.join("/")
        ),
    )
}

fn a5(desk: &DeskRuns) -> Verdict {
    let real = desk.real_taus();
    let mut adv_taus = Vec::new();
    for (&seed, run) in SEEDS.iter().zip(&desk.seeds) {
        let test = run.splits.test().unwrap();
        let traces = attack_traces(run, seed, 100);
        let (mixed, _) = build_mixed_set(test, &traces, MixMode::FinalPlusPenultimate).unwrap();
        let adv = mixed.adversarial_only();
        adv_taus.push(taus(&run.model, &adv.inputs, &adv.labels, &run.reference, seed).2);
    }
    let (a, b) = (
        desk.median_abs_tau(&real, MetricId::MaxP),
        desk.median_abs_tau(&adv_taus, MetricId::MaxP),
    );
    verdict(
        b < a,
        format!(
            "MaxP median |τ| real {a:.3} vs adversarial-only {b:.3}; all metrics adversarial-only: {}",
            fmt_taus(&adv_taus)
        ),
    )
}

// ---------------------------------------------------------------------- A6

fn a6() -> Verdict {
    let splits = make_blobs(&BlobSpec::desk(0)).unwrap();
    let (pool, test) = (splits.pool().unwrap(), splits.test().unwrap());
    let policies = [
        SelectionPolicy::random(0),
        SelectionPolicy::metric(MetricId::Var, Some(MetricId::MaxP)),
        SelectionPolicy::metric(MetricId::KL, Some(MetricId::MaxP)),
        SelectionPolicy::metric(MetricId::LSA, None),
        SelectionPolicy::metric(MetricId::DSA, None),
    ];
    let gains: Vec<(String, f64)> = policies
        .iter()
        .map(|&policy| {
            let cfg = RetrainConfig {
                policy,
                ..RetrainConfig::default()
            };
            assert_eq!(
                (
                    cfg.initial_size,
                    cfg.batch_size,
                    cfg.epochs_per_iteration,
                    cfg.repetitions
                ),
                (1000, 500, 50, 5)
            );
            let trace = retrain_loop(pool, test, &cfg).unwrap();
            (policy.label(), trace.median_gain(MID_BUDGET_ITERATION).unwrap())
        })
        .collect();
    let g = |i: usize| gains[i].1;
    let var_ok = g(1) >= MIN_GAIN_RATIO * g(0);
    let kl_ok = g(2) >= MIN_GAIN_RATIO * g(0);
    let beat = g(1).min(g(2)) > g(3).max(g(4));
    let listing: Vec<String> = gains.iter().map(|(l, v)| format!("{l} {v:+.4}")).collect();
    verdict(
        var_ok && kl_ok && beat,
        format!(
            "median gain iteration 0→{MID_BUDGET_ITERATION}: {}; Var+MaxP/random {:.3} {}, KL+MaxP/random {:.3} {} (≥ {MIN_GAIN_RATIO}); both above LSA and DSA {}",
            listing.join(", "),
            g(1) / g(0),
            ok(var_ok),
            g(2) / g(0),
            ok(kl_ok),
            ok(beat)
        ),
    )
}

// ---------------------------------------------------------------------- A7

fn run_cli(dir: &Path, threads: usize, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dropsel"))
        .args(args)
        .args(["--seed", "11", "--threads", &threads.to_string(), "--out-dir"])
        .arg(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(dir: &Path, threads: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let steps: &[&[&str]] = &[
        &["gen-data"],
        &["train"],
        &["mc-score", "--k", "20"],
        &["correlate", "--labels", "test_y.dst"],
        &["curve", "--labels", "test_y.dst"],
        &["attack", "--n-traces", "20", "--k", "20"],
        &["mix-correlate", "--mode", "final-plus-penultimate", "--k", "20"],
        &[
            "retrain-sim",
            "--policy",
            "Var+MaxP",
            "--reps",
            "2",
            "--epochs",
            "3",
            "--batch",
            "2000",
            "--k",
            "20",
        ],
        &["report", "correlation.json", "curve_KL.json", "retrain.json"],
    ];
    for s in steps {
        run_cli(dir, threads, s);
    }
    let ff = dir.join("ff");
    std::fs::create_dir_all(&ff).unwrap();
    run_cli(
        &ff,
        threads,
        &[
            "mc-score",
            "--from-files",
            "--prob-tensor",
            "../probs_mc.dst",
            "--det-probs",
            "../probs.dst",
        ],
    );
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn a7() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let runs = [
        (root.path().join("t1a"), 1),
        (root.path().join("t1b"), 1),
        (root.path().join("t8"), 8),
    ];
    for (dir, threads) in &runs {
        pipeline(dir, *threads);
    }
    let reference = files(&runs[0].0);
    let mut differing = Vec::new();
    for (dir, _) in &runs[1..] {
        let other = files(dir);
        if other.len() != reference.len() {
            differing.push(format!(
                "{}: {} files vs {}",
                dir.display(),
                other.len(),
                reference.len()
            ));
        }
        for p in &reference {
            let rel = p.strip_prefix(&runs[0].0).unwrap();
            if std::fs::read(p).ok() != std::fs::read(dir.join(rel)).ok() {
                differing.push(rel.display().to_string());
            }
        }
    }
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} output files byte-identical across two --threads 1 runs and a --threads 8 run (10 commands)",
                reference.len()
            )
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------------- A8

fn kendall_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut num, mut tx, mut ty) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let sx = (x[i] - x[j]).partial_cmp(&0.0).unwrap() as i64;
            let sy = (y[i] - y[j]).partial_cmp(&0.0).unwrap() as i64;
            num += sx * sy;
            tx += i64::from(sx == 0);
            ty += i64::from(sy == 0);
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    num as f64 / (((n0 - tx) * (n0 - ty)) as f64).sqrt()
}

fn dcor_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let centered = |v: &[f64]| -> Vec<Vec<f64>> {
        let d: Vec<Vec<f64>> = v.iter().map(|a| v.iter().map(|b| (a - b).abs()).collect()).collect();
        let row: Vec<f64> = d.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let grand = row.iter().sum::<f64>() / n as f64;
        (0..n)
            .map(|i| (0..n).map(|j| d[i][j] - row[i] - row[j] + grand).collect())
            .collect()
    };
    let (a, b) = (centered(x), centered(y));
    let dot = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| -> f64 {
        p.iter()
            .zip(q)
            .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u * v).sum::<f64>())
            .sum::<f64>()
            / (n * n) as f64
    };
    (dot(&a, &b) / (dot(&a, &a) * dot(&b, &b)).sqrt()).sqrt()
}

fn dsa_oracle(train: &Matrix, train_pred: &[usize], x: &[f32], class: usize) -> f64 {
    let dist = |t: &[f32]| -> f64 {
        t.iter()
            .zip(x)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut same: Vec<f64> = Vec::new();
    let mut other: Vec<f64> = Vec::new();
    for (j, t) in train.iter_rows().enumerate() {
        if train_pred[j] == class {
            same.push(dist(t))
        } else {
            other.push(dist(t))
        }
    }
    same.sort_by(f64::total_cmp);
    other.sort_by(f64::total_cmp);
    same[0] / other[0]
}

fn a8() -> Verdict {
    let mut worst = [0.0f64; 3];
    let mut rng = child_rng(8, "a8", 0);
    for _ in 0..50 {
        let n = rng.gen_range(10..=300);
        let levels = rng.gen_range(2..=50u32);
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels))).collect();
        let mut y: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        y[0] = 0.0;
        y[1] = 1.0;
        let mut xs = x.clone();
        xs[0] = 0.0;
        xs[1] = f64::from(levels);
        worst[0] = worst[0].max((kendall_tau_b(&xs, &y).unwrap() - kendall_oracle(&xs, &y)).abs());

        let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let v: Vec<f64> = u.iter().map(|a| a * a + 0.3 * rng.gen::<f64>()).collect();
        worst[1] = worst[1].max((distance_correlation(&u, &v).unwrap() - dcor_oracle(&u, &v)).abs());

        let (m, d, c) = (n, rng.gen_range(1..=8), 3);
        let train = Matrix::new(m, d, (0..m * d).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let train_pred: Vec<usize> = (0..m).map(|j| j % c).collect();
        let q = 20;
        let test = Matrix::new(q, d, (0..q * d).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let test_pred: Vec<usize> = (0..q).map(|_| rng.gen_range(0..c)).collect();
        let got = dsa(&train, &train_pred, &test, &test_pred).unwrap();
        for (i, (&class, value)) in test_pred.iter().zip(&got.per_input).enumerate() {
            let want = dsa_oracle(&train, &train_pred, test.row(i), class);
            worst[2] = worst[2].max((value.unwrap() - want).abs());
        }
    }
    let pass = worst[0] <= TOL_PAIRS && worst[1] <= TOL_NAIVE && worst[2] <= TOL_NAIVE;
    verdict(
        pass,
        format!(
            "50 instances, n ≤ 300: max |Δ| Kendall {:.1e} (≤ {TOL_PAIRS:.0e}), dCor {:.1e} (≤ {TOL_NAIVE:.0e}), DSA {:.1e} (≤ {TOL_NAIVE:.0e})",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------------- A9

fn a9(desk: &DeskRuns) -> Verdict {
    let run = &desk.seeds[0];
    let test: &Dataset = run.splits.test().unwrap();
    let rows = seeded_shuffle(test.len(), &mut child_rng(9, "a9", 0));
    let mut worst = 0.0f64;
    // Diagnostics: steps whose ±h interval switches a ReLU unit on or off,
    // and the worst error over the remaining steps.
    let (mut crossing_points, mut crossings, mut worst_smooth) = (0, 0, 0.0f64);
    for &r in rows.iter().take(FD_POINTS) {
        let x32 = test.features.row(r);
        let label = test.labels[r];
        let g = run.model.input_gradient(x32, label).unwrap();
        let x: Vec<f64> = x32.iter().map(|&v| f64::from(v)).collect();
        let scale = g.iter().map(|v| f64::from(v.abs())).fold(0.0, f64::max);
        let mut crossed = false;
        for i in 0..x.len() {
            let (mut hi, mut lo) = (x.clone(), x.clone());
            hi[i] += FD_STEP;
            lo[i] -= FD_STEP;
            let ((l_hi, p_hi), (l_lo, p_lo)) = (
                common::loss_f64(&run.model, &hi, label),
                common::loss_f64(&run.model, &lo, label),
            );
            let fd = (l_hi - l_lo) / (2.0 * FD_STEP);
            let gi = f64::from(g[i]);
            let denom = gi.abs().max(fd.abs()).max(1e-3 * scale).max(f64::MIN_POSITIVE);
            let err = (gi - fd).abs() / denom;
            worst = worst.max(err);
            if p_hi != p_lo {
                crossed = true;
                crossings += 1;
            } else {
                worst_smooth = worst_smooth.max(err);
            }
        }
        crossing_points += usize::from(crossed);
    }
    verdict(
        worst <= MAX_GRAD_REL_ERR,
        format!(
            "max relative error {worst:.2e} over {FD_POINTS} points × 20 inputs (central differences, h = {FD_STEP}; ≤ {MAX_GRAD_REL_ERR}); \
             {crossings} steps on {crossing_points} points cross a ReLU kink, worst error on the other steps {worst_smooth:.2e}"
        ),
    )
}
