//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::Rows;
use cucl::diffmath::{forward_backward, Array};
use cucl::evalkit::{compute_metrics, knn_predict, AccuracyMatrix};
use cucl::harness::{run_experiment, RunConfig};
use cucl::losses::{cucl_loss, ntxent_loss, siamese_stopgrad_loss, Backbone, LossConfig};
use cucl::quantizer::{hard_quantize, soft_assign, soft_quantize, soft_quantize_var, Codebook, CodebookVars};
use cucl::rehearsal::{sample_distance, select_furthest, RehearsalMode};

const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    check: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "metric oracle", limit: Duration::from_secs(1), check: metric_oracle },
        Criterion { name: "quantizer limit", limit: Duration::from_secs(5), check: quantizer_limit },
        Criterion { name: "gradient suite", limit: Duration::from_secs(30), check: gradient_suite },
        Criterion { name: "rehearsal oracle", limit: Duration::from_secs(5), check: rehearsal_oracle },
        Criterion { name: "knn sanity", limit: Duration::from_secs(5), check: knn_sanity },
        Criterion { name: "determinism", limit: Duration::from_secs(600), check: determinism },
        Criterion { name: "suboptimality trend", limit: Duration::from_secs(600), check: suboptimality_trend },
        Criterion { name: "rehearsal trend", limit: Duration::from_secs(600), check: rehearsal_trend },
    ];
    // Optional substring filters, e.g. `cargo test --test acceptance -- oracle`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
        .collect();
    let mut failed = 0;
    for c in &selected {
        let start = Instant::now();
        let outcome = (c.check)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; over the {:?} budget", c.limit)),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:<20} {detail} [{:.2}s]", c.name, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", selected.len() - failed, selected.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metric_oracle() -> Outcome {
    let hand = AccuracyMatrix::from_rows(2, vec![vec![0.8], vec![0.6, 0.9]]).map_err(|e| e.to_string())?;
    let m = compute_metrics(&hand).map_err(|e| e.to_string())?;
    let hand_err = (m.acc - 0.75)
        .abs()
        .max((m.bwt.unwrap_or(f64::NAN) + 0.2).abs())
        .max((m.maa - 0.775).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=10);
        let rows = common::random_triangular(&mut rng, t);
        let (acc, bwt, maa) = common::metrics(&rows);
        let got = compute_metrics(&AccuracyMatrix::from_rows(t, rows).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        if got.bwt.is_some() != bwt.is_some() {
            return Err(format!("bwt definedness differs for T={t}"));
        }
        let bwt_err = match (got.bwt, bwt) {
            (Some(a), Some(b)) => (a - b).abs(),
            _ => 0.0,
        };
        worst = worst.max((got.acc - acc).abs()).max(bwt_err).max((got.maa - maa).abs());
    }
    ensure(
        worst <= 1e-12 && hand_err <= 1e-12,
        format!("hand case err {hand_err:.1e}, max err {worst:.1e} over 1000 matrices"),
    )
}

fn random_books(rng: &mut ChaCha8Rng, m: usize, k: usize, s: usize) -> (Codebook, Vec<Rows>) {
    let arrays: Vec<Array> = (0..m).map(|_| common::gaussian(rng, k, s)).collect();
    let rows = arrays.iter().map(common::to_rows).collect();
    (Codebook::from_books(arrays).unwrap(), rows)
}

/// The limit only holds where the nearest codeword is strict by a margin
/// large against tau; draws with a top-two gap below `100·tau` in any book
/// are redrawn and counted.
fn quantizer_limit() -> Outcome {
    const TAU: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst_limit: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut redrawn = 0;
    let mut accepted = 0;
    while accepted < 1000 {
        let (cb, books) = random_books(&mut rng, 8, 8, 16);
        let x = common::gaussian(&mut rng, 1, 128);
        if common::min_top_two_gap(x.row(0), &books) < 100.0 * TAU {
            redrawn += 1;
            continue;
        }
        accepted += 1;
        let soft = soft_quantize(&x, &cb, TAU).map_err(|e| e.to_string())?;
        let (hard, _) = hard_quantize(&x, &cb).map_err(|e| e.to_string())?;
        let oracle = common::hard_quantize(&common::to_rows(&x), &books);
        if common::to_rows(&hard) != oracle {
            return Err("hard_quantize disagrees with exhaustive argmin".into());
        }
        worst_limit = worst_limit.max(soft.max_abs_diff(&hard));
        for (i, sub) in x.row(0).chunks(16).enumerate() {
            let w = soft_assign(sub, cb.book(i), 5.0).map_err(|e| e.to_string())?;
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(
        worst_limit <= 1e-6 && worst_sum <= 1e-9,
        format!(
            "max |soft - hard| at tau 1e-4 = {worst_limit:.1e} ({redrawn} near-tied draws redrawn), \
             max |sum w - 1| at tau 5 = {worst_sum:.1e}"
        ),
    )
}

/// Relative error between tape gradients and central differences of the
/// reference implementation, plus the forward mismatch.
fn compare<P, F>(inputs: &[Array], program: P, reference: F, check: &[bool]) -> Result<(f64, f64), String>
where
    P: FnOnce(&mut cucl::diffmath::Tape, &[cucl::diffmath::Var]) -> cucl::Result<cucl::diffmath::Var>,
    F: Fn(&[Rows]) -> f64,
{
    let (value, grads) = forward_backward(inputs, program).map_err(|e| e.to_string())?;
    let rows: Vec<Rows> = inputs.iter().map(common::to_rows).collect();
    let forward_err = (value - reference(&rows)).abs();
    let numeric = common::numeric_gradients(inputs, &reference, 1e-5);
    let mut worst: f64 = 0.0;
    for ((g, n), &on) in grads.iter().zip(&numeric).zip(check) {
        if on {
            worst = worst.max(common::relative_error(g.data(), n));
        }
    }
    Ok((worst, forward_err))
}

fn gradient_suite() -> Outcome {
    const B: usize = 4;
    const D: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut report = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, worst: f64, fwd: f64| {
        ok &= worst <= 1e-4 && fwd <= 1e-10;
        report.push(format!("{name} {worst:.1e}"));
    };

    for literal in [false, true] {
        let cfg = LossConfig { tau_l: 0.5, backbone: Backbone::SiameseStopgrad, literal_indicator: literal };
        let (mut worst, mut fwd) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let inputs: Vec<Array> = (0..4).map(|_| common::gaussian(&mut rng, B, D)).collect();
            let c = cfg.clone();
            let (w, f) = compare(
                &inputs,
                |t, v| cucl_loss(t, v[0], v[1], v[2], v[3], &c),
                |r| common::cucl(&r[0], &r[1], &r[2], &r[3], 0.5, literal),
                &[true; 4],
            )?;
            worst = worst.max(w);
            fwd = fwd.max(f);
        }
        record(if literal { "cucl(literal)" } else { "cucl" }, worst, fwd);
    }

    let (mut worst, mut fwd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let inputs: Vec<Array> = (0..2).map(|_| common::gaussian(&mut rng, B, D)).collect();
        let (w, f) = compare(
            &inputs,
            |t, v| ntxent_loss(t, v[0], v[1], 0.5),
            |r| common::ntxent(&r[0], &r[1], 0.5),
            &[true; 2],
        )?;
        worst = worst.max(w);
        fwd = fwd.max(f);
    }
    record("ntxent", worst, fwd);

    // Targets are stop-gradient: their tape gradient must be exactly zero and
    // only the predictor outputs are compared against differences.
    let (mut worst, mut fwd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let inputs: Vec<Array> = (0..4).map(|_| common::gaussian(&mut rng, B, D)).collect();
        let (_, grads) = forward_backward(&inputs, |t, v| siamese_stopgrad_loss(t, v[0], v[1], v[2], v[3]))
            .map_err(|e| e.to_string())?;
        if grads[1].data().iter().chain(grads[3].data()).any(|&g| g != 0.0) {
            return Err("siamese target gradient is not zero".into());
        }
        let (w, f) = compare(
            &inputs,
            |t, v| siamese_stopgrad_loss(t, v[0], v[1], v[2], v[3]),
            |r| common::siamese(&r[0], &r[1], &r[2], &r[3]),
            &[true, false, true, false],
        )?;
        worst = worst.max(w);
        fwd = fwd.max(f);
    }
    record("siamese", worst, fwd);

    // Scalarised through a fixed random projection of the quantized output.
    let (m, k, s, tau) = (4, 8, 4, 5.0);
    let (mut worst, mut fwd) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let mut inputs = vec![common::gaussian(&mut rng, B, D)];
        inputs.extend((0..m).map(|_| common::gaussian(&mut rng, k, s)));
        let proj = common::gaussian(&mut rng, B, D);
        let proj_rows = common::to_rows(&proj);
        let (w, f) = compare(
            &inputs,
            |t, v| {
                let z = soft_quantize_var(t, v[0], &CodebookVars::new(v[1..].to_vec()), tau)?;
                let p = t.constant(proj.clone());
                let weighted = t.mul(z, p)?;
                t.sum(weighted)
            },
            |r| {
                let z = common::soft_quantize(&r[0], &r[1..], tau);
                z.iter().flatten().zip(proj_rows.iter().flatten()).map(|(a, b)| a * b).sum()
            },
            &[true; 5],
        )?;
        worst = worst.max(w);
        fwd = fwd.max(f);
    }
    record("soft_quantize", worst, fwd);

    ensure(ok, format!("max relative error: {}", report.join(", ")))
}

fn rehearsal_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut distance_mismatch = 0;
    let mut select_mismatch = 0;
    for i in 0..1000 {
        let (cb, books) = random_books(&mut rng, 8, 8, 16);
        let x = common::gaussian(&mut rng, 1, 128);
        let got = sample_distance(x.row(0), &cb).map_err(|e| e.to_string())?;
        if got.to_bits() != common::residual(x.row(0), &books).to_bits() {
            distance_mismatch += 1;
        }
        let n = rng.random_range(1..=60);
        // Every other instance draws from a small set so ties are common.
        let distances: Vec<f64> = (0..n)
            .map(|_| if i % 2 == 0 { rng.random::<f64>() * 10.0 } else { rng.random_range(0..5) as f64 })
            .collect();
        let s = rng.random_range(0..=n + 2);
        let picked = select_furthest(&distances, &distances, s).map_err(|e| e.to_string())?;
        if picked != common::furthest_by_sort(&distances, s) {
            select_mismatch += 1;
        }
    }
    ensure(
        distance_mismatch == 0 && select_mismatch == 0,
        format!("1000 instances: {distance_mismatch} distance mismatches, {select_mismatch} selection mismatches"),
    )
}

fn two_clusters(rng: &mut ChaCha8Rng, per_class: usize, dim: usize) -> (Array, Vec<usize>) {
    let noise = common::gaussian(rng, 2 * per_class, dim);
    let mut data = noise.data().to_vec();
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let label = i % 2;
        let centre = if label == 0 { 4.0 } else { -4.0 };
        data[i * dim] += centre;
        data[i * dim + 1] += 2.0;
        labels.push(label);
    }
    (Array::matrix(2 * per_class, dim, data).unwrap(), labels)
}

fn knn_accuracy(train: &Array, train_labels: &[usize], test: &Array, test_labels: &[usize]) -> Result<f64, String> {
    let mut correct = 0;
    for (i, &label) in test_labels.iter().enumerate() {
        if knn_predict(train, train_labels, test.row(i), 20, 0.1).map_err(|e| e.to_string())? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

fn knn_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (train, train_labels) = two_clusters(&mut rng, 200, 16);
    let (test, test_labels) = two_clusters(&mut rng, 500, 16);
    let separable = knn_accuracy(&train, &train_labels, &test, &test_labels)?;

    // Fresh labels independent of the features.
    let classes = 2;
    let mut shuffled_train = train_labels.clone();
    shuffled_train.shuffle(&mut rng);
    let random_test: Vec<usize> = (0..test_labels.len()).map(|_| rng.random_range(0..classes)).collect();
    let chance = knn_accuracy(&train, &shuffled_train, &test, &random_test)?;
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / random_test.len() as f64).sqrt();
    ensure(
        separable >= 0.95 && (chance - p).abs() <= 3.0 * sigma,
        format!("separable {separable:.3} (>= 0.95), shuffled {chance:.3} vs 1/C {p:.2} +- {:.3}", 3.0 * sigma),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |out: &Path| -> Result<(), String> {
        let status = Command::new(env!("CARGO_BIN_EXE_cucl"))
            .args(["run", "--tasks", "3", "--epochs", "3", "--seed", "5", "--out"])
            .arg(out)
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), format!("run exited with {status}")).map(|_| ())
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a)?;
    run(&b)?;
    let mut differing = Vec::new();
    for file in ["matrix.csv", "curve.csv"] {
        let left = std::fs::read(a.join(file)).map_err(|e| e.to_string())?;
        let right = std::fs::read(b.join(file)).map_err(|e| e.to_string())?;
        if left != right {
            differing.push(file);
        }
    }
    ensure(
        differing.is_empty(),
        if differing.is_empty() {
            "matrix.csv and curve.csv byte-identical across two runs".into()
        } else {
            format!("{} differ", differing.join(" and "))
        },
    )
}

fn trend_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.stream.seed = seed;
    c.loss.backbone = Backbone::SiameseStopgrad;
    c
}

fn suboptimality_trend() -> Outcome {
    let (mut first_gap, mut maa_gap) = (0.0, 0.0);
    let mut lines = Vec::new();
    for seed in TREND_SEEDS {
        let mut with = trend_config(seed);
        with.cucl_enabled = true;
        let mut without = trend_config(seed);
        without.cucl_enabled = false;
        let a = run_experiment(&with).map_err(|e| e.to_string())?;
        let b = run_experiment(&without).map_err(|e| e.to_string())?;
        let (fa, fb) = (a.matrix.get(0, 0).unwrap(), b.matrix.get(0, 0).unwrap());
        first_gap += fa - fb;
        maa_gap += a.metrics.maa - b.metrics.maa;
        lines.push(format!("{:+.3}", fa - fb));
    }
    let n = TREND_SEEDS.len() as f64;
    let (first_gap, maa_gap) = (first_gap / n, maa_gap / n);
    ensure(
        first_gap >= 0.03 && maa_gap > 0.0,
        format!(
            "first-task gain {:+.2} points (>= 3; per seed {}), MAA gain {:+.2} points",
            100.0 * first_gap,
            lines.join(" "),
            100.0 * maa_gap
        ),
    )
}

fn rehearsal_trend() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in TREND_SEEDS {
        let mut with = trend_config(seed);
        with.rehearsal = RehearsalMode::Furthest;
        with.buffer_size = 20;
        let mut without = trend_config(seed);
        without.buffer_size = 0;
        let a = run_experiment(&with).map_err(|e| e.to_string())?.metrics.bwt.unwrap();
        let b = run_experiment(&without).map_err(|e| e.to_string())?.metrics.bwt.unwrap();
        if a >= b {
            wins += 1;
        }
        pairs.push(format!("{a:+.3}/{b:+.3}"));
    }
    ensure(
        wins >= 4,
        format!("BWT(S=20) >= BWT(S=0) on {wins} of 5 seeds (S=20/S=0: {})", pairs.join(" ")),
    )
}
