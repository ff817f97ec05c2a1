//! One PASS/FAIL line per acceptance criterion.
//!
//! The MNIST criteria read `subset10k-images-idx3-ubyte.gz` and
//! `subset10k-labels-idx1-ubyte.gz` from `$ECOC_MNIST_DIR`, defaulting to
//! `data/mnist` at the workspace root.
//!
//! The run exits non-zero on a failed criterion only when
//! `ECOC_ACCEPTANCE_STRICT` is set.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use ecoc::attacks::*;
use ecoc::codes::{build_codeword_matrix, sylvester_hadamard};
use ecoc::data::{load_idx, synthesize_gaussian_blobs, BlobSpec, Dataset};
use ecoc::evaluation::{attack_success_rate, confidence_table, AttackRecord, Summary};
use ecoc::model::*;
use ecoc::selftest::op_cases;
use ecoc::tensor::{Tape, Tensor};
use ecoc::training::*;
use rand::Rng;

const GRADIENT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const TRIALS: usize = 100;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst = (0.0f64, String::new());
    let mut note = |err: f64, name: &str| {
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name.to_string());
        }
    };
    for (name, shape, f) in op_cases() {
        for _ in 0..TRIALS {
            let x = normal(&mut r, &shape, 1.0);
            note(gradient_error(&f, &x, FD_STEP), name);
        }
    }
    for trial in 0..TRIALS {
        let ecoc = tiny_ecoc(trial as u64);
        let onehot = tiny_onehot(trial as u64);
        let x = uniform(&mut r, &[6], 0.2, 0.8);
        let at = normal(&mut r, &[1, 6], 0.1);
        let target = r.random_range(0..4);
        let lambda = r.random_range(0.5..5.0);
        let cases: [(&dyn Classifier, AttackKind, f64); 3] = [
            (&ecoc, AttackKind::Proposed, 50.0),
            (&ecoc, AttackKind::CwEcoc, -50.0),
            (&onehot, AttackKind::CwOneHot, -50.0),
        ];
        for (model, kind, c) in cases {
            let obj = Objective::new(model, &x, target, kind, lambda, c).unwrap();
            let f = scalar_fn(|tape: &Tape, v| {
                let unwrap = |e: AttackError| match e {
                    AttackError::Tensor(t) => t,
                    other => panic!("{other}"),
                };
                if kind == AttackKind::CwOneHot {
                    Ok(obj.record_w(tape, v).map_err(unwrap)?.0)
                } else {
                    Ok(obj.record(tape, v).map_err(unwrap)?.0)
                }
            });
            note(gradient_error(&f, &at, FD_STEP), kind.name());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 <= GRADIENT_TOLERANCE && within(Duration::from_secs(30), elapsed),
        format!(
            "{} ops and 3 objectives x {TRIALS} trials, worst relative error {:.2e} ({}), {:.1}s",
            op_cases().len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn code_properties() -> Outcome {
    let start = Instant::now();
    let h = sylvester_hadamard(4).unwrap();
    let orthogonal = (0..16).all(|i| {
        (0..16).all(|j| {
            let dot: i32 = h[i].iter().zip(&h[j]).map(|(&a, &b)| i32::from(a) * i32::from(b)).sum();
            dot == if i == j { 16 } else { 0 }
        })
    });
    let codes = build_codeword_matrix(10, 16).unwrap();
    let mut d = usize::MAX;
    for a in 0..10 {
        for b in a + 1..10 {
            d = d.min(codes.row(a).iter().zip(codes.row(b)).filter(|(x, y)| x != y).count());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        orthogonal && d == 8 && within(Duration::from_secs(1), elapsed),
        format!("H16 H16^T = 16 I: {orthogonal}, min distance of 10x16 code {d}, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn probability_map() -> Outcome {
    let codes = build_codeword_matrix(10, 16).unwrap();
    let mut exact_worst = 0.0f64;
    for k in 0..10 {
        let activated = codes.row_f64(k);
        let rho: Vec<f64> = (0..10)
            .map(|j| activated.iter().zip(codes.row(j)).map(|(a, &b)| a * f64::from(b)).sum())
            .collect();
        exact_worst = exact_worst.max((class_probabilities(&rho).values[k] - 1.0).abs());
    }
    let identity = ecoc::codes::one_hot_matrix(10).unwrap();
    let mut r = rng(77);
    let mut softmax_worst = 0.0f64;
    for _ in 0..1000 {
        let z = normal(&mut r, &[10], 3.0).into_data();
        let p = class_probabilities(&correlations_with(&z, &identity, Activation::Exp).unwrap()).values;
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            softmax_worst = softmax_worst.max((a - b / s).abs());
        }
    }
    outcome(
        exact_worst <= 1e-9 && softmax_worst <= 1e-12,
        format!("exact codeword |p - 1| {exact_worst:.1e}, identity+exp vs softmax {softmax_worst:.1e} over 1000 vectors"),
    )
}

fn lambda_traces() -> Outcome {
    let c = codes24();
    let stub = LinearModel::ecoc(Tensor::zeros(vec![2, 4]), c.row_f64(0), c).unwrap();
    let x = Tensor::vector(vec![0.5, 0.5]);
    let never = binary_search_attack(&stub, &x, 1, &AttackConfig::new(AttackKind::Proposed, 1e-3, 4, 3, 0.0)).unwrap();
    let lambdas: Vec<f64> = never.rounds.iter().map(|t| t.lambda).collect();
    let grow = [1e-3, 1e-3 * 10.0, 1e-3 * 100.0, 1e-3 * 1000.0];
    let never_ok = lambdas.len() == 4 && lambdas.iter().zip(grow).all(|(a, b)| (a - b).abs() <= 1e-15 * b);

    // Round 1 finds δ = 0 (upper ← 1, λ ← 0.5); later rounds cannot beat
    // the norm already found, so each one raises the lower bound to λ.
    let always = binary_search_attack(&stub, &x, 0, &AttackConfig::new(AttackKind::Proposed, 1.0, 4, 3, 0.0)).unwrap();
    let trace: Vec<(f64, f64, f64)> = always.rounds.iter().map(|t| (t.lambda, t.upper, t.lower)).collect();
    let expected = vec![(1.0, 1.0, 0.0), (0.5, 1.0, 0.5), (0.75, 1.0, 0.75), (0.875, 1.0, 0.875)];
    outcome(
        never_ok && trace == expected,
        format!("never: {lambdas:?}; always (lambda, upper, lower): {trace:?}"),
    )
}

fn grid_oracle() -> Outcome {
    let start = Instant::now();
    let c = codes24();
    let cfg = AttackConfig::new(AttackKind::Proposed, 1e-3, 10, 1000, 0.0);
    let (mut worst, mut agree, mut feasible) = (0.0f64, 0, 0);
    for seed in 0..20 {
        let (w, b, x, target) = grid_case(seed);
        let best = grid_minimum(&w, &b, &c, &x, target, 0.005);
        let m = LinearModel::ecoc(w.clone(), b.clone(), c.clone()).unwrap();
        let r = binary_search_attack(&m, &x, target, &cfg).unwrap();
        let verified = r.success && {
            let p: Vec<f64> = x.data().iter().zip(r.delta.data()).map(|(a, d)| a + d).collect();
            proposed_success(&w, &b, &c, &p, target)
        };
        if verified == best.is_finite() {
            agree += 1;
        }
        if verified && best.is_finite() {
            feasible += 1;
            worst = worst.max(r.l2_norm / best - 1.0);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        agree == 20 && worst <= 0.10 && within(Duration::from_secs(120), elapsed),
        format!(
            "feasibility agrees on {agree}/20, {feasible} feasible, worst excess over grid {:.1}%, {:.1}s",
            100.0 * worst,
            elapsed.as_secs_f64()
        ),
    )
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("ECOC_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

struct Mnist {
    ensemble: EcocEnsemble,
    train: Dataset,
    test: Dataset,
    base_error: f64,
    error: f64,
    train_time: Duration,
}

fn train_mnist() -> Result<Mnist, String> {
    let dir = mnist_dir();
    let data = load_idx(
        dir.join("subset10k-images-idx3-ubyte.gz"),
        dir.join("subset10k-labels-idx1-ubyte.gz"),
    )
    .map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut parts = data.split(&[0.8, 0.2], 0).map_err(|e| e.to_string())?;
    let test = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let arch = Architecture {
        input_shape: vec![1, 28, 28],
        bottom: BottomSpec::Conv {
            channels: vec![4, 8],
            kernel: 3,
        },
        head_hidden: 16,
    };
    let config = TrainConfig {
        epochs: 6,
        batch_size: 32,
        learning_rate: 0.01,
        momentum: 0.9,
        seed: 0,
        validation_fraction: 0.1,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (base, _) = train_base(&train, &arch, &config, |_| {}).map_err(|e| e.to_string())?;
    let codes = build_codeword_matrix(10, 16).unwrap();
    let (ensemble, _) = finetune_ensemble(&base, &train, &codes, &config, |_| {}).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();
    Ok(Mnist {
        base_error: evaluate_error_rate(&base, &test).map_err(|e| e.to_string())?,
        error: evaluate_error_rate(&ensemble, &test).map_err(|e| e.to_string())?,
        ensemble,
        train,
        test,
        train_time,
    })
}

fn campaign(model: &dyn Classifier, test: &Dataset, train: &Dataset, kind: AttackKind, c: f64) -> Vec<AttackRecord> {
    let config = AttackConfig::new(kind, 1e-3, 10, 1000, c);
    let spec = CampaignSpec::new(config.clone(), 50, 0);
    run_campaign(model, test, train, &spec, None)
        .unwrap()
        .iter()
        .map(|item| AttackRecord::from_item(item, &config))
        .collect()
}

fn mnist_reproduction(m: &Mnist, c0: &[AttackRecord], attack_time: Duration) -> Outcome {
    let asr = attack_success_rate(c0).unwrap();
    let s = Summary::of("proposed", &c0.iter().collect::<Vec<_>>()).unwrap();
    let total = m.train_time + attack_time;
    outcome(
        m.error <= 0.05 && c0.len() == 50 && asr >= 0.5 && within(Duration::from_secs(45 * 60), total),
        format!(
            "test error {:.2}% (base {:.2}%), ASR {:.1}% on {} images, mean PSNR {} dB, {:.0}s",
            100.0 * m.error,
            100.0 * m.base_error,
            100.0 * asr,
            c0.len(),
            s.mean_psnr_successes.map_or("n/a".into(), |p| format!("{p:.2}")),
            total.as_secs_f64()
        ),
    )
}

fn confidence_trend(records: &[AttackRecord]) -> Outcome {
    let table = confidence_table(records).unwrap();
    let probs: Vec<Option<f64>> = table.iter().map(|r| r.prob_target_after).collect();
    let psnr: Vec<Option<f64>> = table.iter().map(|r| r.mean_psnr).collect();
    let defined = probs.iter().chain(&psnr).all(Option::is_some);
    let p: Vec<f64> = probs.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let q: Vec<f64> = psnr.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let rising = p.windows(2).all(|w| w[1] >= w[0]);
    let falling = q.windows(2).all(|w| w[1] <= w[0]);
    let top = *p.last().unwrap_or(&f64::NAN);
    let fmt = |v: &[f64], d: usize| v.iter().map(|x| format!("{x:.d$}")).collect::<Vec<_>>().join(" ");
    outcome(
        defined && rising && falling && top >= 0.9,
        format!(
            "c = 0 1.5 2.5 5: target probability {}, PSNR {} dB, ASR {}",
            fmt(&p, 3),
            fmt(&q, 2),
            fmt(&table.iter().map(|r| r.asr).collect::<Vec<_>>(), 2)
        ),
    )
}

fn attack_ordering() -> Outcome {
    let data = synthesize_gaussian_blobs(&BlobSpec {
        classes: 32,
        dims: 32,
        separation: 8.0,
        per_class: 100,
        seed: 0,
    })
    .unwrap();
    let mut parts = data.split(&[0.8, 0.2], 0).unwrap();
    let test = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let arch = Architecture {
        input_shape: vec![32],
        bottom: BottomSpec::Dense { widths: vec![32] },
        head_hidden: 16,
    };
    let config = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let (base, _) = train_base(&train, &arch, &config, |_| {}).unwrap();
    let codes = build_codeword_matrix(32, 32).unwrap();
    let (ensemble, _) = finetune_ensemble(&base, &train, &codes, &config, |_| {}).unwrap();
    let error = evaluate_error_rate(&ensemble, &test).unwrap();
    let proposed = attack_success_rate(&campaign(&ensemble, &test, &train, AttackKind::Proposed, 0.0)).unwrap();
    let cw = attack_success_rate(&campaign(&ensemble, &test, &train, AttackKind::CwEcoc, 0.0)).unwrap();
    outcome(
        proposed >= cw,
        format!(
            "M=32 N=32 blobs, test error {:.2}%: proposed ASR {:.1}%, C&W-ECOC ASR {:.1}%",
            100.0 * error,
            100.0 * proposed,
            100.0 * cw
        ),
    )
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, o: Outcome) {
    println!("{} {id} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    results.push(o.passed);
}

fn main() {
    let mut results = Vec::new();
    report(&mut results, 1, "gradient-correctness", gradients());
    report(&mut results, 2, "code-properties", code_properties());
    report(&mut results, 3, "probability-map", probability_map());
    report(&mut results, 4, "lambda-search-trace", lambda_traces());
    report(&mut results, 5, "grid-oracle", grid_oracle());
    match train_mnist() {
        Ok(m) => {
            let mut records = Vec::new();
            for c in [0.0, 1.5, 2.5, 5.0] {
                let start = Instant::now();
                records.extend(campaign(&m.ensemble, &m.test, &m.train, AttackKind::Proposed, c));
                if c == 0.0 {
                    report(&mut results, 6, "mnist-reproduction", mnist_reproduction(&m, &records, start.elapsed()));
                }
            }
            report(&mut results, 7, "confidence-trend", confidence_trend(&records));
        }
        Err(e) => {
            report(&mut results, 6, "mnist-reproduction", outcome(false, format!("no data: {e}")));
            report(&mut results, 7, "confidence-trend", outcome(false, format!("no data: {e}")));
        }
    }
    report(&mut results, 8, "attack-ordering", attack_ordering());
    let failed = results.iter().filter(|&&p| !p).count();
    println!("{} criteria, {failed} failed", results.len());
    if failed > 0 && std::env::var_os("ECOC_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
