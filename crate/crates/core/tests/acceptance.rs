//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its
//! criterion before asserting, so `cargo test --test acceptance -- --nocapture`
//! doubles as a report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posecluster::cli::{RunManifest, TrainMetrics, MANIFEST_FILE};
use posecluster::clustering::{
    elbow_select, gaussian_mixture, soft_assign, soft_assign_node, target_distribution, ClusterConfig, SoftAssignment,
};
use posecluster::data::{angle_to_bin, generate_dataset, split, GeneratorSpec, Sample};
use posecluster::diff::{finite_diff_check, softmax_rows, GradCheckReport, Matrix, Tape};
use posecluster::losses::{
    angle_loss, cross_entropy, expected_angle, expected_angle_values, kl_clustering, mse_regression, one_hot,
    AngleBinSpec,
};
use posecluster::model::{checksum, EncoderConfig, ModelParams, CENTERS};
use posecluster::training::{
    evaluate, init_stage2, loss_and_grads, stage2_samples, train_stage1, train_stage2, AdamState, Batch, TrainConfig,
};

/// Clustering weight that should help occluded samples.
const MODERATE_BETA: f64 = 1.0;
/// Clustering weight large enough to wreck the Stage-1 latent space.
const EXTREME_BETA: f64 = 1000.0;

fn verdict(id: u8, name: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("[acceptance {id}] {tag} {name}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut m = random_matrix(rng, rows, cols, 0.01, 1.0);
    for r in 0..rows {
        let s: f64 = m.row(r).iter().sum();
        m.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// The angle losses are O(1e3) in value, so rounding in `f(x ± h)` dominates
/// below this step.
const ANGLE_STEP: f64 = 2e-4;
/// The divergence stays O(1), where truncation dominates instead.
const KL_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
const INSTANCES: u64 = 20;

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let spec = AngleBinSpec::default();
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for i in 0..INSTANCES {
        let mut r = rng(1000 + i);
        let n = r.random_range(1..6);
        let logits = random_matrix(&mut r, n, spec.num_bins, -2.0, 2.0);
        let truth: Vec<f64> = (0..n).map(|_| r.random_range(-99.0..99.0)).collect();
        let bins: Vec<usize> = truth.iter().map(|&a| angle_to_bin(a, &spec).unwrap()).collect();
        let targets = one_hot(&bins, spec.num_bins).unwrap();
        let alpha = r.random_range(0.1..2.0);

        reports.push(
            finite_diff_check(
                "cross_entropy(softmax(logits))",
                |t, y| {
                    let p = t.softmax_rows(y)?;
                    cross_entropy(t, p, &targets)
                },
                &logits,
                ANGLE_STEP,
                GRAD_TOL,
            )
            .unwrap(),
        );
        reports.push(
            finite_diff_check(
                "mse(expected_angle(softmax(logits)))",
                |t, y| {
                    let p = t.softmax_rows(y)?;
                    let a = expected_angle(t, p, &spec)?;
                    mse_regression(t, a, &truth)
                },
                &logits,
                ANGLE_STEP,
                GRAD_TOL,
            )
            .unwrap(),
        );
        reports.push(
            finite_diff_check(
                "angle_loss(logits)",
                |t, y| Ok(angle_loss(t, y, &truth, &spec, alpha)?.total),
                &logits,
                ANGLE_STEP,
                GRAD_TOL,
            )
            .unwrap(),
        );

        let k = r.random_range(2..6);
        let d = r.random_range(2..5);
        let p = random_stochastic(&mut r, n, k);
        let q = random_matrix(&mut r, n, k, 0.05, 1.0);
        reports.push(finite_diff_check("kl(P || q)", |t, x| kl_clustering(t, x, &p), &q, KL_STEP, GRAD_TOL).unwrap());

        let latents = random_matrix(&mut r, n, d, -2.0, 2.0);
        let centers = random_matrix(&mut r, k, d, -2.0, 2.0);
        reports.push(
            finite_diff_check(
                "kl(P || soft_assign(latents, centers)) wrt latents",
                |t, l| {
                    let c = t.constant(centers.clone());
                    let q = soft_assign_node(t, l, c)?;
                    kl_clustering(t, q, &p)
                },
                &latents,
                KL_STEP,
                GRAD_TOL,
            )
            .unwrap(),
        );
        reports.push(
            finite_diff_check(
                "kl(P || soft_assign(latents, centers)) wrt centers",
                |t, c| {
                    let l = t.constant(latents.clone());
                    let q = soft_assign_node(t, l, c)?;
                    kl_clustering(t, q, &p)
                },
                &centers,
                KL_STEP,
                GRAD_TOL,
            )
            .unwrap(),
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .unwrap();
    let failed: Vec<_> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op_name.clone())
        .collect();
    let passed = failed.is_empty() && elapsed < 30.0;
    verdict(
        1,
        "gradient suite",
        passed,
        &format!(
            "{} checks ({} per loss), worst relative error {:.2e} in {}, {:.1}s",
            reports.len(),
            INSTANCES,
            worst.max_relative_error,
            worst.op_name,
            elapsed
        ),
    );
    assert!(failed.is_empty(), "failed checks: {failed:?}");
    assert!(elapsed < 30.0, "took {elapsed:.1}s");
}

fn kl(q: &Matrix, p: &Matrix) -> f64 {
    let mut tape = Tape::new();
    let q = tape.constant(q.clone());
    let node = kl_clustering(&mut tape, q, p).unwrap();
    tape.value(node).item()
}

fn max_row_sum_error(m: &Matrix) -> f64 {
    m.iter_rows()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[test]
fn distribution_invariants() {
    let mut r = rng(2);
    let (mut softmax_err, mut q_err, mut p_err) = (0.0f64, 0.0f64, 0.0f64);
    let (mut min_kl, mut max_self_kl) = (f64::INFINITY, 0.0f64);
    for _ in 0..1000 {
        let n = r.random_range(1..10);
        let c = r.random_range(2..67);
        let scale = r.random_range(0.1..100.0);
        softmax_err = softmax_err.max(max_row_sum_error(&softmax_rows(&random_matrix(
            &mut r, n, c, -scale, scale,
        ))));

        let k = r.random_range(1..12);
        let d = r.random_range(2..17);
        let spread = r.random_range(0.1..20.0);
        let latents = random_matrix(&mut r, n, d, -spread, spread);
        let centers = random_matrix(&mut r, k, d, -spread, spread);
        let q = soft_assign(&latents, &centers).unwrap();
        q_err = q_err.max(max_row_sum_error(&q.0));
        let p = target_distribution(&q);
        p_err = p_err.max(max_row_sum_error(&p.0));

        let a = random_stochastic(&mut r, n, k.max(2));
        let b = random_stochastic(&mut r, n, k.max(2));
        min_kl = min_kl.min(kl(&b, &a)).min(kl(&q.0, &p.0));
        max_self_kl = max_self_kl.max(kl(&a, &a).abs()).max(kl(&q.0, &q.0).abs());
    }
    let passed = softmax_err <= 1e-9 && q_err <= 1e-9 && p_err <= 1e-9 && min_kl >= 0.0 && max_self_kl < 1e-12;
    verdict(
        2,
        "distribution invariants",
        passed,
        &format!(
            "row-sum errors softmax {softmax_err:.1e}, Q {q_err:.1e}, P {p_err:.1e}; min KL {min_kl:.2e}; max KL(P||P) {max_self_kl:.1e}"
        ),
    );
    assert!(passed);
}

#[test]
fn decoding_oracle() {
    let spec = AngleBinSpec {
        num_bins: 66,
        bin_width: 3.0,
        min_angle: -99.0,
    };
    let uniform = Matrix::filled(1, 66, 1.0 / 66.0);
    let mut one_hot_last = Matrix::zeros(1, 66);
    one_hot_last.set(0, 65, 1.0);
    let u = expected_angle_values(&uniform, &spec)[0];
    let top = expected_angle_values(&one_hot_last, &spec)[0];

    let mut worst = 0.0f64;
    for i in 0..1980 {
        let a = -99.0 + i as f64 * 0.1;
        let bin = angle_to_bin(a, &spec).unwrap();
        worst = worst.max((spec.bin_center(bin) - a).abs());
    }
    let passed = u.abs() <= 1e-9 && (top - 97.5).abs() <= 1e-9 && worst <= 1.5 + 1e-9;
    verdict(
        3,
        "decoding oracle",
        passed,
        &format!("uniform -> {u:e}, one-hot bin 66 -> {top}, worst bin round-trip {worst:.6} deg"),
    );
    assert!(passed);
}

#[test]
fn target_distribution_oracle() {
    let q = SoftAssignment(Matrix::from_rows(&[[0.9, 0.1], [0.1, 0.9]]).unwrap());
    let p = target_distribution(&q);
    let (hi, lo) = (0.81 / 0.82, 0.01 / 0.82);
    let oracle_err = [
        p.0.get(0, 0) - hi,
        p.0.get(0, 1) - lo,
        p.0.get(1, 0) - lo,
        p.0.get(1, 1) - hi,
    ]
    .iter()
    .fold(0.0f64, |m, v| m.max(v.abs()));

    // cyclic shifts of one random row give equal soft frequencies per cluster
    let mut r = rng(4);
    let k = 4;
    let mut rows = Vec::with_capacity(10_000);
    while rows.len() < 10_000 {
        let base: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0)).collect();
        for s in 0..k {
            rows.push((0..k).map(|j| base[(j + s) % k]).collect::<Vec<f64>>());
        }
    }
    let q = SoftAssignment(Matrix::from_rows(&rows).unwrap());
    let p = target_distribution(&q);
    let flips = (0..rows.len())
        .filter(|&i| p.0.argmax_row(i) != q.0.argmax_row(i))
        .count();

    let passed = oracle_err <= 1e-12 && flips == 0;
    verdict(
        4,
        "target distribution oracle",
        passed,
        &format!(
            "max deviation from hand values {oracle_err:.1e}; argmax changed on {flips} of {} rows",
            rows.len()
        ),
    );
    assert!(passed);
}

#[test]
fn elbow_reproduction() {
    let start = Instant::now();
    let ks = [5, 10, 15, 20, 30, 40];
    let mut chosen = Vec::new();
    for seed in 0..10 {
        let (latents, _) = gaussian_mixture(10, 60, 16, 10.0, 1.0, seed);
        let cfg = ClusterConfig {
            seed,
            ..Default::default()
        };
        chosen.push(elbow_select(&latents, &ks, &cfg).unwrap().chosen_k);
    }
    let hits = chosen.iter().filter(|&&k| k == 10).count();
    let elapsed = start.elapsed().as_secs_f64();
    let passed = hits >= 9 && elapsed < 120.0;
    verdict(
        5,
        "elbow reproduction",
        passed,
        &format!("chosen K per seed {chosen:?}: {hits}/10 hit K = 10 in {elapsed:.1}s"),
    );
    assert!(passed);
}

/// Occluded validation MAE after Stage 2 for each beta, from one shared Stage-1 model.
fn occluded_mae_by_beta(seed: u64, betas: &[f64]) -> Vec<f64> {
    let generator = GeneratorSpec {
        seed,
        ..Default::default()
    };
    let data = generate_dataset(&generator).unwrap();
    let config = TrainConfig {
        seed,
        cluster: ClusterConfig {
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let spec = AngleBinSpec::default();
    let (train, val) = split(&data, 0.8, seed).unwrap();
    let clean: Vec<Sample> = train.iter().filter(|s| !s.occluded).cloned().collect();
    let mut params = ModelParams::init(&EncoderConfig::default(), spec.num_bins, seed).unwrap();
    train_stage1(
        &mut params,
        &clean,
        None,
        &config,
        &spec,
        &mut AdamState::new(),
        &mut |_, _| Ok(()),
    )
    .unwrap();
    init_stage2(&mut params, &train, &config.cluster).unwrap();
    let stage2 = stage2_samples(&train, config.stage2_include_clean);
    betas
        .iter()
        .map(|&beta| {
            let cfg = TrainConfig { beta, ..config.clone() };
            let mut p = params.clone();
            train_stage2(
                &mut p,
                &stage2,
                None,
                &cfg,
                &spec,
                &mut AdamState::new(),
                &mut |_, _| Ok(()),
            )
            .unwrap();
            evaluate(&p, &val, &spec, cfg.weights())
                .unwrap()
                .mae
                .occluded
                .unwrap()
                .mean
        })
        .collect()
}

#[test]
fn two_stage_directional_reproduction() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let (mut moderate_ok, mut extreme_ok) = (true, true);
    for seed in [0, 1, 2] {
        let mae = occluded_mae_by_beta(seed, &[0.0, MODERATE_BETA, EXTREME_BETA]);
        let gain = 1.0 - mae[1] / mae[0];
        moderate_ok &= gain >= 0.05;
        extreme_ok &= mae[2] > mae[0];
        lines.push(format!(
            "seed {seed}: beta 0 {:.3}, beta {MODERATE_BETA} {:.3} ({:+.1}%), beta {EXTREME_BETA} {:.3}",
            mae[0],
            mae[1],
            -100.0 * gain,
            mae[2]
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let passed = moderate_ok && extreme_ok && elapsed < 1800.0;
    verdict(
        6,
        "two-stage directional reproduction",
        passed,
        &format!(
            "moderate >= 5% better in every seed: {moderate_ok}; extreme worse in every seed: {extreme_ok}; {elapsed:.0}s; {}",
            lines.join("; ")
        ),
    );
    assert!(passed, "{}", lines.join("\n"));
}

#[test]
fn stage_equivalence() {
    let spec = AngleBinSpec::default();
    let data = generate_dataset(&GeneratorSpec {
        sample_count: 1500,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let (train, _) = split(&data, 0.8, 7).unwrap();
    let clean: Vec<Sample> = train.iter().filter(|s| !s.occluded).cloned().collect();
    let config = TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 3,
        beta: 0.0,
        seed: 7,
        ..Default::default()
    };
    let mut base = ModelParams::init(&EncoderConfig::default(), spec.num_bins, 7).unwrap();
    let mut adam = AdamState::new();
    train_stage1(&mut base, &clean, None, &config, &spec, &mut adam, &mut |_, _| Ok(())).unwrap();
    let next = stage2_samples(&train, false);

    // continued Stage 1 for three more epochs on the Stage-2 data
    let mut cont = base.clone();
    let cont_cfg = TrainConfig {
        stage1_epochs: 3,
        ..config.clone()
    };
    let h1 = train_stage1(
        &mut cont,
        &next,
        None,
        &cont_cfg,
        &spec,
        &mut adam.clone(),
        &mut |_, _| Ok(()),
    )
    .unwrap();

    // Stage 2 with beta = 0 from the same state
    let mut s2 = base.clone();
    init_stage2(&mut s2, &train, &config.cluster).unwrap();
    let centers = s2.centers.clone();
    let first_batch = Batch::from_samples(&next[..config.batch_size], 32);
    let r_cont = loss_and_grads(&base, &first_batch, None, &spec, config.weights()).unwrap();
    let r_s2 = loss_and_grads(&s2, &first_batch, None, &spec, config.weights()).unwrap();
    let h2 = train_stage2(&mut s2, &next, None, &config, &spec, &mut adam.clone(), &mut |_, _| {
        Ok(())
    })
    .unwrap();

    let losses_equal = h1.len() == 3
        && h1.iter().zip(&h2).all(|(a, b)| {
            a.l_yaw.to_bits() == b.l_yaw.to_bits()
                && a.l_pitch.to_bits() == b.l_pitch.to_bits()
                && a.l_roll.to_bits() == b.l_roll.to_bits()
                && a.l_total.to_bits() == b.l_total.to_bits()
        });
    let report_equal = r_cont.report == r_s2.report && !r_s2.grads.contains_key(CENTERS);
    let mut s2_without_centers = s2.clone();
    s2_without_centers.centers = None;
    let params_equal = checksum(&s2_without_centers) == checksum(&cont);
    let centers_frozen = s2.centers == centers;
    let passed = losses_equal && report_equal && params_equal && centers_frozen;
    verdict(
        7,
        "stage equivalence",
        passed,
        &format!(
            "3 epochs: per-epoch losses bit-equal {losses_equal}, batch LossReport equal {report_equal}, parameters bit-equal {params_equal}, centers untouched {centers_frozen}"
        ),
    );
    assert!(passed);
}

struct DefaultRun {
    _dir: tempfile::TempDir,
    data: PathBuf,
    runs: [PathBuf; 2],
}

fn posecluster(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_posecluster"))
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The default configuration trained twice into separate directories.
fn default_runs() -> &'static DefaultRun {
    static RUNS: OnceLock<DefaultRun> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data.jsonl");
        let p = |p: &Path| p.to_str().unwrap().to_string();
        posecluster(&["gen-data", "--seed", "0", "--out", &p(&data)]);
        let runs = [dir.path().join("a"), dir.path().join("b")];
        for out in &runs {
            posecluster(&["train", "--seed", "0", "--data", &p(&data), "--out", &p(out)]);
        }
        DefaultRun { _dir: dir, data, runs }
    })
}

#[test]
fn reproducibility() {
    let run = default_runs();
    let metrics: Vec<String> = run
        .runs
        .iter()
        .map(|d| fs::read_to_string(d.join("metrics.json")).unwrap())
        .collect();
    let parsed: Vec<TrainMetrics> = metrics.iter().map(|m| serde_json::from_str(m).unwrap()).collect();
    let ckpt: Vec<String> = run
        .runs
        .iter()
        .map(|d| fs::read_to_string(d.join("checkpoints/final/manifest.txt")).unwrap())
        .collect();
    let passed = metrics[0] == metrics[1] && ckpt[0] == ckpt[1] && parsed[0].final_checksum == parsed[1].final_checksum;
    verdict(
        8,
        "reproducibility",
        passed,
        &format!(
            "final checksum {} vs {}; metrics JSON identical: {}",
            &parsed[0].final_checksum[..16],
            &parsed[1].final_checksum[..16],
            metrics[0] == metrics[1]
        ),
    );
    assert!(passed);
}

#[test]
fn clustering_footprint() {
    let run = default_runs();
    let manifest = RunManifest::read(&run.runs[0].join(MANIFEST_FILE)).unwrap();
    let n = posecluster::data::read_dataset(&run.data).unwrap().1.len();
    let fp = manifest
        .clustering
        .clone()
        .expect("train records the clustering footprint");
    let passed = manifest.complete
        && fp.embedding_count == 10
        && fp.dataset_size == n
        && n == 5000
        && fp.k_at_most_tenth_of_n
        && fp.embedding_count * 10 <= fp.dataset_size;
    verdict(
        9,
        "clustering footprint",
        passed,
        &format!(
            "K = {} cluster embeddings vs N = {} samples ({} clustered); K <= N/10: {}",
            fp.embedding_count, fp.dataset_size, fp.clustered_samples, fp.k_at_most_tenth_of_n
        ),
    );
    assert!(passed);
}
