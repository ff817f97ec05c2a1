mod common;

use common::*;
use ecoc::codes::{build_codeword_matrix, CodewordMatrix};
use ecoc::data::{synthesize_gaussian_blobs, BlobSpec, Dataset};
use ecoc::model::{Architecture, BottomSpec, Classifier, LinearModel, OneHotModel};
use ecoc::tensor::Tensor;
use ecoc::training::*;
use proptest::prelude::*;

fn blobs(classes: usize, per_class: usize, seed: u64) -> Dataset {
    synthesize_gaussian_blobs(&BlobSpec {
        classes,
        dims: 8,
        separation: 8.0,
        per_class,
        seed,
    })
    .unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 0.05,
        momentum: 0.9,
        seed: 3,
        validation_fraction: 0.2,
        ..TrainConfig::default()
    }
}

fn mean_cross_entropy(model: &OneHotModel, data: &Dataset) -> f64 {
    let mut total = 0.0;
    for i in 0..data.len() {
        let z = model.logits(&data.image_tensor(i)).unwrap().into_data();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[data.label(i)];
    }
    total / data.len() as f64
}

fn negate_column(c: &CodewordMatrix, j: usize) -> CodewordMatrix {
    let rows: Vec<Vec<i8>> = (0..c.classes())
        .map(|k| c.row(k).iter().enumerate().map(|(i, &b)| if i == j { -b } else { b }).collect())
        .collect();
    CodewordMatrix::from_rows(rows).unwrap()
}

#[test]
fn separable_blobs_train_to_low_validation_error() {
    let data = blobs(2, 200, 1);
    let (_, report) = train_base(&data, &dense_arch(8), &config(5), |_| {}).unwrap();
    assert!(report.validation_error < 0.02, "{}", report.validation_error);
}

#[test]
fn one_epoch_lowers_the_loss() {
    let data = blobs(2, 5, 2);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        validation_fraction: 0.2,
        ..config(1)
    };
    let parts = data.split(&[0.8, 0.2], cfg.seed).unwrap();
    let init = OneHotModel::init(dense_arch(8), 2, &mut rng(cfg.seed)).unwrap();
    let before = mean_cross_entropy(&init, &parts[0]);
    let (trained, report) = train_base(&data, &dense_arch(8), &cfg, |_| {}).unwrap();
    let after = mean_cross_entropy(&trained, &parts[0]);
    assert!(after < before, "{after} >= {before}");
    assert!((report.records[0].loss - after).abs() < 1e-9);
}

#[test]
fn training_is_reproducible() {
    let data = blobs(4, 30, 3);
    let codes = build_codeword_matrix(4, 8).unwrap();
    let run = || {
        let (base, _) = train_base(&data, &dense_arch(8), &config(2), |_| {}).unwrap();
        let (ens, _) = finetune_ensemble(&base, &data, &codes, &config(2), |_| {}).unwrap();
        (
            ecoc::model::Model::from(base).to_bytes(),
            ecoc::model::Model::from(ens).to_bytes(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn progress_records_are_reported() {
    let data = blobs(2, 20, 4);
    let mut seen = Vec::new();
    let (_, report) = train_base(&data, &dense_arch(8), &config(3), |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, report.records);
    assert_eq!(seen.len(), 6);
    assert_eq!(seen[1].csv_line().split(',').count(), 4);
    assert_eq!(EpochRecord::CSV_HEADER, "epoch,split,loss,error");
    assert!(seen[5].csv_line().starts_with("3,base-validation,"));
}

#[test]
fn finetuning_keeps_the_error_and_the_code() {
    let data = blobs(4, 150, 5);
    let parts = data.split(&[0.75, 0.25], 9).unwrap();
    let (train, test) = (&parts[0], &parts[1]);
    let codes = build_codeword_matrix(4, 8).unwrap();
    let arch = Architecture {
        input_shape: vec![8],
        bottom: BottomSpec::Dense { widths: vec![32] },
        head_hidden: 16,
    };
    let (base, _) = train_base(train, &arch, &config(10), |_| {}).unwrap();
    for bottom in [BottomMode::Frozen, BottomMode::Shared] {
        let cfg = TrainConfig { bottom, ..config(10) };
        let (ens, report) = finetune_ensemble(&base, train, &codes, &cfg, |_| {}).unwrap();
        assert_eq!(ens.codewords(), &codes);
        let base_error = evaluate_error_rate(&base, test).unwrap();
        let ens_error = evaluate_error_rate(&ens, test).unwrap();
        assert!(ens_error <= base_error + 0.02, "{bottom:?}: {ens_error} vs {base_error}");
        assert!(report.records.iter().all(|r| r.stage == "finetune"));
    }
}

#[test]
fn frozen_branches_train_independently() {
    let data = blobs(4, 40, 6);
    let codes = build_codeword_matrix(4, 8).unwrap();
    let flipped = negate_column(&codes, 5);
    let (base, _) = train_base(&data, &dense_arch(8), &config(2), |_| {}).unwrap();
    let (a, _) = finetune_ensemble(&base, &data, &codes, &config(2), |_| {}).unwrap();
    let (b, _) = finetune_ensemble(&base, &data, &flipped, &config(2), |_| {}).unwrap();
    assert_eq!(a.bottom(), base.bottom());
    assert_eq!(a.bottom(), b.bottom());
    for i in 0..8 {
        if i == 5 {
            assert_ne!(a.branches()[i], b.branches()[i]);
        } else {
            assert_eq!(a.branches()[i], b.branches()[i]);
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let data = blobs(2, 10, 1);
    assert!(train_base(&data, &dense_arch(5), &config(1), |_| {}).is_err());
    assert!(train_base(&data, &dense_arch(8), &config(0), |_| {}).is_err());
    let huge = TrainConfig {
        learning_rate: 1e300,
        momentum: 0.0,
        ..config(2)
    };
    assert!(matches!(
        train_base(&data, &dense_arch(8), &huge, |_| {}),
        Err(TrainError::NonFinite { .. })
    ));
}

#[test]
fn config_limits() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { validation_fraction: 0.0, ..TrainConfig::default() },
        TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn bit_loss_values() {
    assert!((per_bit_loss(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
    assert!((per_bit_loss(0.0, -1.0) - 2f64.ln()).abs() < 1e-15);
    assert!(per_bit_loss(50.0, 1.0) < 1e-20);
    assert!((per_bit_loss(3.0, -1.0) - (1.0 + 3f64.exp()).ln()).abs() < 1e-12);
    assert!((per_bit_loss(-800.0, 1.0) - 800.0).abs() < 1e-9);
}

#[test]
fn bit_loss_derivative_matches_differences() {
    let mut r = rng(7);
    for _ in 0..200 {
        let z = normal(&mut r, &[1], 4.0).into_data()[0];
        for t in [-1.0, 1.0] {
            // d/dz log(1 + e^{-tz}) = -t / (1 + e^{tz})
            let analytic = -t / (1.0 + (t * z).exp());
            let h = 1e-5;
            let numeric = (per_bit_loss(z + h, t) - per_bit_loss(z - h, t)) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-6);
        }
    }
}

#[test]
fn error_rate_examples() {
    let images: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let labels = vec![0, 1, 0, 1, 1, 1, 0, 0, 1, 0];
    let data = Dataset::new(images, vec![1], labels.clone(), 2).unwrap();
    // Predicts class 1 when x > 0.45.
    let w = Tensor::new(vec![1, 2], vec![-10.0, 10.0]).unwrap();
    let model = LinearModel::one_hot(w, vec![4.5, -4.5]).unwrap();
    let wrong = (0..10).filter(|&i| usize::from(i as f64 / 10.0 > 0.45) != labels[i]).count();
    assert_eq!(wrong, 6);
    assert_eq!(evaluate_error_rate(&model, &data).unwrap(), 0.6);

    let constant = LinearModel::one_hot(Tensor::zeros(vec![1, 4]), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let balanced = Dataset::new(vec![0.5; 8], vec![1], vec![0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
    assert_eq!(evaluate_error_rate(&constant, &balanced).unwrap(), 0.75);
    let all_ones = Dataset::new(vec![0.5; 3], vec![1], vec![1; 3], 4).unwrap();
    assert_eq!(evaluate_error_rate(&constant, &all_ones).unwrap(), 0.0);
    assert!(Dataset::new(Vec::new(), vec![1], Vec::new(), 4).is_err());
}

proptest! {
    #[test]
    fn bit_loss_decreases_in_the_margin(a in -30.0f64..30.0, d in 1e-3f64..10.0, t in prop::sample::select(vec![-1.0, 1.0])) {
        let (z1, z2) = (a * t, (a + d) * t);
        prop_assert!(per_bit_loss(z2, t) < per_bit_loss(z1, t));
    }

    #[test]
    fn bit_loss_is_convex(a in -30.0f64..30.0, b in -30.0f64..30.0, s in 0.0f64..1.0) {
        let mid = s * a + (1.0 - s) * b;
        let chord = s * per_bit_loss(a, 1.0) + (1.0 - s) * per_bit_loss(b, 1.0);
        prop_assert!(per_bit_loss(mid, 1.0) <= chord + 1e-12);
    }
}
