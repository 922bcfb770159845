//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero when any of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lrsv::backend::lr::{fit_lr, indicator_matrix, normal_equation_residual};
use lrsv::backend::wccn::{apply_wccn, average_within_class_covariance, fit_wccn};
use lrsv::backend::BackendKind;
use lrsv::data::{synth_frames, FrameMatrix};
use lrsv::dvector::{loss_and_gradients, Mlp};
use lrsv::eval::{eer, min_dcf, min_dcf_raw, relative_improvement, DcfParams, ScoredTrials};
use lrsv::experiment::{fuse_system_scores, run_comparison, CorpusSource, ExperimentConfig, FrontEndKind, Pipeline};
use lrsv::gmm::{train_ubm_em, BwStats, EmConfig, Ubm};
use lrsv::ivector::{extract_ivector, train_tv, TvConfig, TvModel};
use lrsv::linalg::principal_angles;

const BENCHMARK: &str = include_str!("../configs/benchmark.json");

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    time_limit_s: Option<f64>,
    run: fn() -> Outcome,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

fn benchmark() -> ExperimentConfig {
    ExperimentConfig::from_json(BENCHMARK).expect("benchmark config parses")
}

// ---------------------------------------------------------------- criterion 1

/// Conjugate gradients on the normal equations (CGLS) for `min |X' a - y|`,
/// written with plain loops. Stops once `|X (y - X' a)|` falls below
/// `tol * |X y|`.
fn cgls(x: &DMatrix<f64>, y: &[f64], tol: f64) -> (Vec<f64>, f64) {
    let (d, n) = x.shape();
    let xt_mul = |a: &[f64]| -> Vec<f64> { (0..n).map(|j| (0..d).map(|i| x[(i, j)] * a[i]).sum()).collect() };
    let x_mul = |r: &[f64]| -> Vec<f64> { (0..d).map(|i| (0..n).map(|j| x[(i, j)] * r[j]).sum()).collect() };
    let norm = |v: &[f64]| v.iter().map(|t| t * t).sum::<f64>().sqrt();

    let mut a = vec![0.0; d];
    let mut r = y.to_vec();
    let mut s = x_mul(&r);
    let target = tol * norm(&s).max(f64::MIN_POSITIVE);
    let mut p = s.clone();
    let mut gamma: f64 = s.iter().map(|t| t * t).sum();
    for _ in 0..50 * d {
        if norm(&s) <= target {
            break;
        }
        let q = xt_mul(&p);
        let alpha = gamma / q.iter().map(|t| t * t).sum::<f64>();
        for i in 0..d {
            a[i] += alpha * p[i];
        }
        for j in 0..n {
            r[j] -= alpha * q[j];
        }
        s = x_mul(&r);
        let gamma_new: f64 = s.iter().map(|t| t * t).sum();
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for i in 0..d {
            p[i] = s[i] + beta * p[i];
        }
    }
    // recompute the residual from scratch rather than trusting the recurrence
    let fit = xt_mul(&a);
    let resid: Vec<f64> = y.iter().zip(&fit).map(|(y, f)| y - f).collect();
    let rel = norm(&x_mul(&resid)) / norm(&x_mul(y)).max(f64::MIN_POSITIVE);
    (a, rel)
}

fn lr_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut max_diff, mut max_resid, mut max_oracle_resid) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let d = rng.random_range(1..=10);
        let n = rng.random_range((2 * d).max(4)..=100);
        let s = rng.random_range(2..=n.min(8));
        let labels: Vec<usize> = (0..n).map(|j| if j < s { j } else { rng.random_range(0..s) }).collect();
        let x = gaussian_matrix(&mut rng, d, n);
        let y = indicator_matrix(&labels, s).expect("indicators");
        let model = fit_lr(&x, &y, 0.0).expect("full-rank fit");
        max_resid = max_resid.max(normal_equation_residual(&model, &x, &y));
        for k in 0..s {
            let target: Vec<f64> = y.row(k).iter().copied().collect();
            let (a, rel) = cgls(&x, &target, 1e-12);
            max_oracle_resid = max_oracle_resid.max(rel);
            for (i, ai) in a.iter().enumerate() {
                max_diff = max_diff.max((model.a()[(i, k)] - ai).abs());
            }
        }
    }
    Outcome::new(
        max_diff <= 1e-8 && max_resid <= 1e-8 && max_oracle_resid <= 1e-12,
        format!(
            "max |A - A_oracle| = {max_diff:.2e} (tol 1e-8), normal-equation residual {max_resid:.2e} (tol 1e-8), \
             oracle relative residual {max_oracle_resid:.2e} (tol 1e-12)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn ivector_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_diff = 0.0f64;
    let mut zero_exact = true;
    for _ in 0..50 {
        let c = rng.random_range(1..=3);
        let f = rng.random_range(1..=3);
        let r = rng.random_range(1..=4);
        let cf = c * f;
        let t = gaussian_matrix(&mut rng, cf, r);
        let sigma = DVector::from_fn(cf, |_, _| rng.random_range(0.5..2.0));
        let tv = TvModel::new(t.clone(), sigma.clone()).expect("tv model");

        let mut stats = BwStats::zeros(c, f, false);
        for k in 0..c {
            stats.n[k] = if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.0..30.0)
            };
            for j in 0..f {
                stats.f[(k, j)] = normal(&mut rng) * (stats.n[k] + 1.0).sqrt();
            }
        }
        let got = extract_ivector(&tv, &stats, "u").expect("extract").x;

        // dense evaluation with explicit inverse over the full supervector
        let mut n_big = DMatrix::zeros(cf, cf);
        let mut sinv = DMatrix::zeros(cf, cf);
        let mut fbar = DVector::zeros(cf);
        for k in 0..c {
            for j in 0..f {
                let row = k * f + j;
                n_big[(row, row)] = stats.n[k];
                sinv[(row, row)] = 1.0 / sigma[row];
                fbar[row] = stats.f[(k, j)];
            }
        }
        let precision = DMatrix::identity(r, r) + t.transpose() * &sinv * &n_big * &t;
        let inverse = precision.try_inverse().expect("invertible precision");
        let expected = inverse * t.transpose() * &sinv * fbar;
        max_diff = max_diff.max((got - expected).amax());

        let zero = extract_ivector(&tv, &BwStats::zeros(c, f, false), "z")
            .expect("extract")
            .x;
        zero_exact &= zero.iter().all(|v| *v == 0.0);
    }
    Outcome::new(
        max_diff <= 1e-10 && zero_exact,
        format!("max |x - x_dense| = {max_diff:.2e} (tol 1e-10), zero stats give exact zero: {zero_exact}"),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Exhaustive sweep: thresholds are minus infinity and every distinct score;
/// a trial is accepted when its score exceeds the threshold.
fn sweep(pairs: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let nt = pairs.iter().filter(|p| p.1).count() as f64;
    let nn = pairs.iter().filter(|p| !p.1).count() as f64;
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds
        .iter()
        .map(|&t| {
            let misses = pairs.iter().filter(|p| p.1 && p.0 <= t).count() as f64;
            let fas = pairs.iter().filter(|p| !p.1 && p.0 > t).count() as f64;
            (misses / nt, fas / nn)
        })
        .collect()
}

fn oracle_eer(pairs: &[(f64, bool)]) -> f64 {
    let pts = sweep(pairs);
    for k in 1..pts.len() {
        let (pm1, pf1) = pts[k];
        if pm1 >= pf1 {
            if pm1 == pf1 {
                return pm1;
            }
            let (pm0, pf0) = pts[k - 1];
            let d0 = pf0 - pm0;
            let d1 = pf1 - pm1;
            let alpha = d0 / (d0 - d1);
            return pm0 + alpha * (pm1 - pm0);
        }
    }
    unreachable!("the last threshold rejects every trial")
}

fn oracle_min_dcf_raw(pairs: &[(f64, bool)], p: &DcfParams) -> f64 {
    sweep(pairs)
        .iter()
        .map(|&(pm, pf)| p.c_miss * p.p_target * pm + p.c_fa * (1.0 - p.p_target) * pf)
        .fold(f64::INFINITY, f64::min)
}

fn random_fixture(rng: &mut ChaCha8Rng, on_grid: bool) -> Vec<(f64, bool)> {
    let n = rng.random_range(2..=50);
    let mut pairs: Vec<(f64, bool)> = (0..n)
        .map(|i| {
            let target = match i {
                0 => true,
                1 => false,
                _ => rng.random_bool(0.4),
            };
            let shift = if target { 0.8 } else { 0.0 };
            let s = if on_grid {
                // multiples of 1/8 are exact under 2s+1 and produce ties
                (rng.random_range(-24i32..=32) as f64 + 8.0 * shift) / 8.0
            } else {
                normal(rng) + shift
            };
            (s, target)
        })
        .collect();
    // mix the guaranteed first two into the order
    let k = rng.random_range(0..pairs.len());
    pairs.swap(0, k);
    pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let params = [DcfParams::DCF08, DcfParams::DCF10];
    let (mut mismatches, mut rank_failures, mut separation_failures) = (0, 0, 0);
    for i in 0..200 {
        let on_grid = i % 2 == 0;
        let pairs = random_fixture(&mut rng, on_grid);
        let scored = ScoredTrials::from_labeled(&pairs).expect("fixture");
        let e = eer(&scored).expect("eer");
        if e != oracle_eer(&pairs) {
            mismatches += 1;
        }
        for p in &params {
            let raw = min_dcf_raw(&scored, p).expect("min dcf");
            let expected = oracle_min_dcf_raw(&pairs, p);
            if raw != expected || min_dcf(&scored, p).expect("min dcf") != p.report(expected) {
                mismatches += 1;
            }
        }
        if on_grid {
            let moved: Vec<(f64, bool)> = pairs.iter().map(|&(s, l)| (2.0 * s + 1.0, l)).collect();
            let moved = ScoredTrials::from_labeled(&moved).expect("fixture");
            let same = eer(&moved).expect("eer") == e
                && params
                    .iter()
                    .all(|p| min_dcf(&moved, p).expect("dcf") == min_dcf(&scored, p).expect("dcf"));
            if !same {
                rank_failures += 1;
            }
        }
    }
    for _ in 0..50 {
        let n_tar = rng.random_range(1..=25);
        let n_non = rng.random_range(1..=25);
        let gap = rng.random_range(0.0..2.0);
        let mut pairs: Vec<(f64, bool)> = (0..n_non).map(|_| (rng.random_range(-3.0..0.0), false)).collect();
        pairs.extend((0..n_tar).map(|_| (rng.random_range(0.0..3.0) + gap + 1e-9, true)));
        let scored = ScoredTrials::from_labeled(&pairs).expect("fixture");
        let zero = eer(&scored).expect("eer") == 0.0 && params.iter().all(|p| min_dcf(&scored, p).expect("dcf") == 0.0);
        if !zero {
            separation_failures += 1;
        }
    }
    Outcome::new(
        mismatches == 0 && rank_failures == 0 && separation_failures == 0,
        format!(
            "200 fixtures: {mismatches} oracle mismatches, {rank_failures} rank-invariance failures (100 grid fixtures), \
             {separation_failures} non-zero separated fixtures (50)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn relative_formula() -> Outcome {
    let v = relative_improvement(0.69, 1.24).expect("positive baseline");
    Outcome::new(
        (v - (-0.4435)).abs() <= 5e-4,
        format!("(0.69 - 1.24) / 1.24 = {v:.5} (expected -0.4435 +- 5e-4)"),
    )
}

// ---------------------------------------------------------------- criterion 5

fn gmm_monotone() -> Outcome {
    let CorpusSource::Synth(spec) = benchmark().corpus else {
        panic!("benchmark corpus is synthetic");
    };
    let corpus = synth_frames(&spec).expect("synthetic corpus");
    let frames: Vec<FrameMatrix> = corpus.utterances.into_iter().map(|u| u.frames).collect();
    let mut worst = f64::INFINITY;
    let mut failures = Vec::new();
    for seed in 0..10 {
        let cfg = EmConfig {
            n_components: 16,
            iterations: 25,
            seed,
        };
        let ll = train_ubm_em(&frames, &cfg).expect("EM").log_likelihoods;
        for w in ll.windows(2) {
            let slack = (w[1] - w[0]) / w[0].abs();
            worst = worst.min(slack);
            if w[1] < w[0] - 1e-8 * w[0].abs() {
                failures.push(seed);
                break;
            }
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "C=16, 25 iterations, 10 seeds on {} frames; decreasing seeds {failures:?}; smallest relative step {worst:.2e} (tol -1e-8)",
            frames.iter().map(|f| f.len()).sum::<usize>()
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn tv_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (c, f, r, n_utts) = (3, 2, 2, 500);
    let t_true = gaussian_matrix(&mut rng, c * f, r);
    let sigma = DVector::from_fn(c * f, |_, _| rng.random_range(0.5..1.5));
    let weights = DVector::from_element(c, 1.0 / c as f64);
    let vars = DMatrix::from_fn(c, f, |k, j| sigma[k * f + j]);
    let ubm = Ubm::new(weights, DMatrix::zeros(c, f), vars).expect("ubm");

    // centralized first-order stats drawn from the TV model itself:
    // n_c frames of mean T_c x and covariance Sigma_c sum to
    // n_c T_c x + sqrt(n_c) Sigma_c^(1/2) eps
    let stats: Vec<BwStats> = (0..n_utts)
        .map(|_| {
            let x = DVector::from_fn(r, |_, _| normal(&mut rng));
            let shift = &t_true * &x;
            let frames = rng.random_range(60.0..300.0);
            let mut s = BwStats::zeros(c, f, false);
            for k in 0..c {
                let n = frames * rng.random_range(0.2..0.5);
                s.n[k] = n;
                for j in 0..f {
                    let row = k * f + j;
                    s.f[(k, j)] = n * shift[row] + (n * sigma[row]).sqrt() * normal(&mut rng);
                }
            }
            s
        })
        .collect();
    let cfg = TvConfig {
        rank: r,
        iterations: 20,
        seed: 7,
        update_sigma: false,
    };
    let learned = train_tv(&stats, &ubm, &cfg).expect("tv training");
    let angles = principal_angles(learned.model.t(), &t_true);
    let largest = angles.iter().copied().fold(0.0, f64::max);
    Outcome::new(
        largest < 0.05,
        format!("C*F=6, R=2, 500 utterances, 20 iterations: principal angles {angles:.4?} rad (limit 0.05)"),
    )
}

// ---------------------------------------------------------------- criterion 7

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let (input, classes, rows) = (6, 4, 10);
        let mlp = Mlp::init(input, &[8, 7], classes, seed).expect("net");
        let x = gaussian_matrix(&mut rng, rows, input);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let (_, grads) = loss_and_gradients(&mlp, &x, &labels).expect("gradients");
        let loss_at = |m: &Mlp| loss_and_gradients(m, &x, &labels).expect("loss").0;

        for (li, g) in grads.iter().enumerate() {
            // weights and biases of each layer are checked as separate tensors
            for tensor in 0..2 {
                let analytic: Vec<f64> = if tensor == 0 {
                    g.w.iter().copied().collect()
                } else {
                    g.b.iter().copied().collect()
                };
                let numeric: Vec<f64> = (0..analytic.len())
                    .map(|k| {
                        let mut plus = mlp.clone();
                        let mut minus = mlp.clone();
                        if tensor == 0 {
                            plus.layers[li].w[k] += h;
                            minus.layers[li].w[k] -= h;
                        } else {
                            plus.layers[li].b[k] += h;
                            minus.layers[li].b[k] -= h;
                        }
                        (loss_at(&plus) - loss_at(&minus)) / (2.0 * h)
                    })
                    .collect();
                let diff: f64 = analytic
                    .iter()
                    .zip(&numeric)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                    + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
                worst = worst.max(if scale > 0.0 { diff / scale } else { 0.0 });
            }
        }
    }
    Outcome::new(
        worst <= 1e-5,
        format!("3 nets with hidden layers [8, 7]: worst per-tensor relative error {worst:.2e} (tol 1e-5)"),
    )
}

// ---------------------------------------------------------------- criterion 8

fn wccn_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let d = rng.random_range(2..=8);
        let classes = rng.random_range(3..=10);
        let mix = gaussian_matrix(&mut rng, d, d) + DMatrix::identity(d, d) * 0.5;
        let mut cols = Vec::new();
        let mut labels = Vec::new();
        for k in 0..classes {
            let center = DVector::from_fn(d, |_, _| 3.0 * normal(&mut rng));
            for _ in 0..rng.random_range(d + 2..=20) {
                let z = DVector::from_fn(d, |_, _| normal(&mut rng));
                cols.push(&center + &mix * z);
                labels.push(k);
            }
        }
        let x = DMatrix::from_columns(&cols);
        let model = fit_wccn(&x, &labels, 0.0).expect("wccn");
        let moved: Vec<DVector<f64>> = cols.iter().map(|c| apply_wccn(&model, c).expect("apply")).collect();
        let w = average_within_class_covariance(&DMatrix::from_columns(&moved), &labels).expect("covariance");
        worst = worst.max((w - DMatrix::identity(d, d)).amax());
    }
    Outcome::new(
        worst <= 1e-6,
        format!("10 labeled sets: max |W_transformed - I| = {worst:.2e} (tol 1e-6)"),
    )
}

// ---------------------------------------------------------------- criterion 9

fn benchmark_direction() -> Outcome {
    let cfg = benchmark();
    let report = run_comparison(&cfg, None).expect("comparison");
    let eer_of = |kind: BackendKind| {
        report
            .rows
            .iter()
            .find(|row| row.back_end == kind.name())
            .map(|row| row.eer)
            .expect("back-end row")
    };
    let lr = eer_of(BackendKind::LrCosine);
    let cosine = eer_of(BackendKind::Cosine);
    let baselines = [BackendKind::WccnCosine, BackendKind::LdaCosine, BackendKind::LdaPlda];
    let (best_kind, best) = baselines
        .iter()
        .map(|k| (k.name(), eer_of(*k)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("baselines");
    Outcome::new(
        lr <= cosine && lr <= 1.10 * best,
        format!(
            "mean EER over {} runs: lr_cosine {:.3}%, cosine {:.3}%, best baseline {best_kind} {:.3}% (bound {:.3}%)",
            report.n_runs,
            100.0 * lr,
            100.0 * cosine,
            100.0 * best,
            110.0 * best
        ),
    )
}

// ---------------------------------------------------------------- criterion 10

fn fusion_sanity() -> Outcome {
    let mut cfg = benchmark();
    cfg.front_end = vec![FrontEndKind::GmmIvector, FrontEndKind::Dvector];
    let mut pipe = Pipeline::new(&cfg, None).expect("pipeline");
    let (mut worst_excess, mut checks, mut self_ok) = (f64::NEG_INFINITY, 0, true);
    for &be in &cfg.back_end {
        let a = pipe.scores(FrontEndKind::GmmIvector, be).expect("scores");
        let b = pipe.scores(FrontEndKind::Dvector, be).expect("scores");
        let fused = fuse_system_scores(&[a.clone(), b.clone()]).expect("fusion");
        for c in 0..fused.len() {
            for r in 0..fused[c].len() {
                let worse = eer(&a[c][r]).expect("eer").max(eer(&b[c][r]).expect("eer"));
                worst_excess = worst_excess.max(eer(&fused[c][r]).expect("eer") - worse);
                checks += 1;
            }
        }
        let doubled = fuse_system_scores(&[a.clone(), a.clone()]).expect("fusion");
        let alone = pipe.report("x", be.name(), &a).expect("report");
        let with_self = pipe.report("x", be.name(), &doubled).expect("report");
        self_ok &= alone == with_self;
    }
    Outcome::new(
        worst_excess <= 0.01 && self_ok,
        format!(
            "gmm_ivector + dvector over {checks} (back-end, condition, run) cells: largest fused EER minus worse EER \
             {worst_excess:+.4} (limit +0.01); self-fusion reproduces metrics: {self_ok}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 11

fn compare_determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark.json");
    let tmp = tempfile::tempdir().expect("temp dir");
    let run = |name: &str| -> Vec<u8> {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_lrsv"))
            .arg("--out-dir")
            .arg(&out)
            .arg("compare")
            .arg("--config")
            .arg(&config)
            .output()
            .expect("spawn lrsv");
        assert!(
            status.status.success(),
            "compare failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
        std::fs::read(out.join("compare.json")).expect("compare.json")
    };
    let first = run("a");
    let second = run("b");
    Outcome::new(
        !first.is_empty() && first == second,
        format!(
            "two `lrsv compare` runs: {} and {} bytes, identical: {}",
            first.len(),
            second.len(),
            first == second
        ),
    )
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "LR oracle equivalence",
            time_limit_s: Some(5.0),
            run: lr_oracle,
        },
        Criterion {
            id: 2,
            name: "i-vector oracle",
            time_limit_s: Some(2.0),
            run: ivector_oracle,
        },
        Criterion {
            id: 3,
            name: "metric oracles",
            time_limit_s: Some(5.0),
            run: metric_oracles,
        },
        Criterion {
            id: 4,
            name: "relative-improvement formula",
            time_limit_s: Some(1.0),
            run: relative_formula,
        },
        Criterion {
            id: 5,
            name: "GMM EM monotonicity",
            time_limit_s: Some(30.0),
            run: gmm_monotone,
        },
        Criterion {
            id: 6,
            name: "TV subspace recovery",
            time_limit_s: Some(60.0),
            run: tv_recovery,
        },
        Criterion {
            id: 7,
            name: "neural gradient check",
            time_limit_s: Some(10.0),
            run: gradient_check,
        },
        Criterion {
            id: 8,
            name: "WCCN whitening",
            time_limit_s: None,
            run: wccn_identity,
        },
        Criterion {
            id: 9,
            name: "synthetic benchmark direction",
            time_limit_s: Some(300.0),
            run: benchmark_direction,
        },
        Criterion {
            id: 10,
            name: "fusion sanity",
            time_limit_s: None,
            run: fusion_sanity,
        },
        Criterion {
            id: 11,
            name: "compare determinism",
            time_limit_s: None,
            run: compare_determinism,
        },
    ];

    println!("acceptance: {} criteria", criteria.len());
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run));
        let secs = start.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                (false, format!("panicked: {msg}"))
            }
        };
        let timing = match c.time_limit_s {
            Some(limit) => {
                if secs >= limit {
                    pass = false;
                    detail.push_str(" [time limit exceeded]");
                }
                format!("{secs:.2}s, limit {limit}s")
            }
            None => format!("{secs:.2}s"),
        };
        println!(
            "criterion {:>2} {} {}: {detail} ({timing})",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name
        );
        if !pass {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
