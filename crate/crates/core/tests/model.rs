mod common;

use std::sync::Arc;

use common::*;
use ecoc::codes::{build_codeword_matrix, one_hot_matrix};
use ecoc::model::*;
use ecoc::tensor::Tensor;
use proptest::prelude::*;

fn dot(a: &[f64], b: &[i8]) -> f64 {
    a.iter().zip(b).map(|(x, &c)| x * f64::from(c)).sum()
}

#[test]
fn correlations_match_direct_summation() {
    let codes = build_codeword_matrix(10, 16).unwrap();
    let mut r = rng(3);
    for _ in 0..50 {
        let z = normal(&mut r, &[16], 2.0);
        let rho = correlations(z.data(), &codes).unwrap();
        for k in 0..10 {
            let mut expected = 0.0;
            for i in 0..16 {
                expected += z.data()[i].tanh() * f64::from(codes.entry(k, i));
            }
            assert!((rho[k] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_logits_give_zero_correlations() {
    let codes = build_codeword_matrix(4, 8).unwrap();
    assert_eq!(correlations(&[0.0; 8], &codes).unwrap(), vec![0.0; 4]);
    assert!(correlations(&[0.0; 7], &codes).is_err());
}

#[test]
fn exact_codeword_activation() {
    let codes = build_codeword_matrix(10, 16).unwrap();
    for k in 0..10 {
        let activated: Vec<f64> = codes.row_f64(k);
        let rho: Vec<f64> = (0..10).map(|j| dot(&activated, codes.row(j))).collect();
        assert_eq!(rho[k], 16.0);
        for j in (0..10).filter(|&j| j != k) {
            let bound = 16.0 - 2.0 * ecoc::codes::hamming(codes.row(j), codes.row(k)) as f64;
            assert!(rho[j] <= bound);
        }
        let p = class_probabilities(&rho);
        assert!((p.values[k] - 1.0).abs() < 1e-9);
        assert!(!p.degenerate);
    }
}

#[test]
fn probability_examples() {
    let p = class_probabilities(&[2.0, 2.0, 0.0, -1.0]);
    assert_eq!(p.values, vec![0.5, 0.5, 0.0, 0.0]);
    let p = class_probabilities(&[-1.0, -2.0, -0.5]);
    assert!(p.degenerate);
    assert_eq!(p.values, vec![1.0 / 3.0; 3]);
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_probabilities(&[0.7; 4]), vec![0.25; 4]);
    let p = softmax_probabilities(&[1000.0, 0.0]);
    assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
}

#[test]
fn identity_code_with_exp_is_softmax() {
    let identity = one_hot_matrix(10).unwrap();
    let mut r = rng(8);
    for _ in 0..1000 {
        let z = normal(&mut r, &[10], 3.0);
        let rho = correlations_with(z.data(), &identity, Activation::Exp).unwrap();
        let p = class_probabilities(&rho).values;
        let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.data().iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            assert!((a - b / s).abs() < 1e-12);
        }
    }
}

#[test]
fn argmax_ties_pick_lowest() {
    assert_eq!(argmax(&[0.1, 0.8, 0.1]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
}

#[test]
fn degenerate_decoding_uses_raw_correlations() {
    let c = build_codeword_matrix(2, 2).unwrap();
    // tanh(z) = (-a, -b) with a > b > 0 makes both correlations negative.
    let s = Decoder::Ecoc(&c).decode(&[-2.0, -0.5]).unwrap();
    assert!(s.degenerate);
    assert_eq!(s.predicted, 1);
    assert_eq!(s.probabilities, vec![0.5, 0.5]);
}

#[test]
fn linear_model_logits_are_affine() {
    let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let m = LinearModel::ecoc(w, vec![0.5, -0.5], build_codeword_matrix(2, 2).unwrap()).unwrap();
    assert_eq!(m.logits(&Tensor::vector(vec![1.0, 1.0])).unwrap().data(), &[4.5, 5.5]);
    let w = Tensor::zeros(vec![3, 4]);
    assert!(LinearModel::ecoc(w.clone(), vec![0.0; 4], build_codeword_matrix(2, 2).unwrap()).is_err());
    assert!(LinearModel::one_hot(w, vec![0.0; 3]).is_err());
}

#[test]
fn architecture_feature_lengths() {
    let conv = Architecture {
        input_shape: vec![1, 28, 28],
        bottom: BottomSpec::Conv {
            channels: vec![4, 8],
            kernel: 3,
        },
        head_hidden: 16,
    };
    assert_eq!(conv.feature_len(), 8 * 7 * 7);
    conv.validate().unwrap();
    assert_eq!(dense_arch(16).feature_len(), 5);
    let bad = Architecture {
        input_shape: vec![16],
        ..conv
    };
    assert!(bad.validate().is_err());
}

fn zero_weight_ensemble(biases: &[f64]) -> EcocEnsemble {
    let codes = build_codeword_matrix(4, 8).unwrap();
    let bottom = SharedBottom {
        layers: vec![Layer::Dense(Dense::zeros(6, 5))],
    };
    let branches = biases
        .iter()
        .map(|&b| Branch {
            hidden: Dense::zeros(5, 4),
            output: Dense {
                weight: Arc::new(Tensor::zeros(vec![4, 1])),
                bias: Arc::new(Tensor::vector(vec![b])),
            },
        })
        .collect();
    EcocEnsemble::new(dense_arch(6), codes, bottom, branches).unwrap()
}

#[test]
fn zero_weights_emit_the_biases() {
    let biases = [0.5, -1.0, 2.0, 0.0, 0.25, -0.75, 1.5, -2.0];
    let m = zero_weight_ensemble(&biases);
    let mut r = rng(4);
    for _ in 0..5 {
        let x = uniform(&mut r, &[6], 0.0, 1.0);
        assert_eq!(m.logits(&x).unwrap().data(), &biases);
    }
}

#[test]
fn branch_count_must_match_code_length() {
    let codes = build_codeword_matrix(4, 8).unwrap();
    let m = zero_weight_ensemble(&[0.0; 8]);
    let branches = m.branches()[..7].to_vec();
    assert!(EcocEnsemble::new(dense_arch(6), codes, m.bottom().clone(), branches).is_err());
}

#[test]
fn branchwise_and_batched_logits_agree() {
    let mut r = rng(5);
    for seed in 0..5 {
        let m = tiny_ecoc(seed);
        let x = uniform(&mut r, &[7, 6], 0.0, 1.0);
        let a = m.logits(&x).unwrap();
        let b = m.logits_branchwise(&x).unwrap();
        assert_eq!(a.shape(), &[7, 8]);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_ensemble_logits_agree_too() {
    let arch = Architecture {
        input_shape: vec![1, 8, 8],
        bottom: BottomSpec::Conv {
            channels: vec![2, 3],
            kernel: 3,
        },
        head_hidden: 4,
    };
    let m = EcocEnsemble::init(arch, build_codeword_matrix(4, 8).unwrap(), &mut rng(6)).unwrap();
    let x = uniform(&mut rng(7), &[3, 1, 8, 8], 0.0, 1.0);
    let a = m.logits(&x).unwrap();
    let b = m.logits_branchwise(&x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn one_branch_change_moves_one_logit() {
    let mut m = tiny_ecoc(11);
    let x = uniform(&mut rng(12), &[6], 0.0, 1.0);
    let before = m.logits(&x).unwrap();
    let mut b = m.branches()[3].clone();
    b.output.bias = Arc::new(Tensor::vector(vec![b.output.bias.data()[0] + 1.0]));
    b.hidden.weight = Arc::new(b.hidden.weight.map(|w| w * 1.5));
    m.set_branch(3, b).unwrap();
    let after = m.logits(&x).unwrap();
    for i in 0..8 {
        if i == 3 {
            assert_ne!(before.data()[i], after.data()[i]);
        } else {
            assert_eq!(before.data()[i], after.data()[i]);
        }
    }
}

#[test]
fn input_shape_is_checked() {
    let m = tiny_ecoc(1);
    assert!(matches!(m.logits(&Tensor::zeros(vec![5])), Err(ModelError::InputShape { .. })));
}

#[test]
fn logits_are_deterministic() {
    let m = tiny_ecoc(2);
    let x = uniform(&mut rng(2), &[6], 0.0, 1.0);
    assert_eq!(m.logits(&x).unwrap(), m.logits(&x).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = tiny_ecoc(21);
    save_checkpoint(&Model::from(m.clone()), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.kind(), ModelKind::Ecoc);
    let loaded = loaded.into_ecoc().unwrap();
    assert_eq!(loaded.codewords(), m.codewords());
    let mut r = rng(22);
    for _ in 0..10 {
        let x = uniform(&mut r, &[6], 0.0, 1.0);
        assert_eq!(m.logits(&x).unwrap().data(), loaded.logits(&x).unwrap().data());
    }
    assert_eq!(Model::from(loaded).to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn one_hot_checkpoint_keeps_its_kind() {
    let m = Model::from(tiny_onehot(3));
    let back = Model::from_bytes(&m.to_bytes()).unwrap();
    assert_eq!(back.kind(), ModelKind::OneHot);
    assert!(matches!(back.clone().into_ecoc(), Err(ModelError::WrongKind { .. })));
    let x = uniform(&mut rng(1), &[6], 0.0, 1.0);
    assert_eq!(
        back.into_one_hot().unwrap().logits(&x).unwrap(),
        tiny_onehot(3).logits(&x).unwrap()
    );
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = Model::from(tiny_ecoc(4)).to_bytes();
    assert_eq!(&bytes[..5], CHECKPOINT_MAGIC);

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 40;
    flipped[mid] ^= 0x10;
    assert!(matches!(Model::from_bytes(&flipped), Err(ModelError::Checksum)));

    assert!(matches!(Model::from_bytes(&bytes[..bytes.len() - 3]), Err(ModelError::Truncated { .. })));
    assert!(matches!(Model::from_bytes(&bytes[..3]), Err(ModelError::Truncated { .. })));

    let mut version = bytes.clone();
    version[4] = b'2';
    assert!(matches!(Model::from_bytes(&version), Err(ModelError::Version(_))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Model::from_bytes(&magic), Err(ModelError::Magic)));

    let mut trailing = bytes;
    trailing.push(0);
    assert!(Model::from_bytes(&trailing).is_err());
}

#[test]
fn base_initialisation_copies_the_bottom() {
    let base = tiny_onehot(5);
    let codes = build_codeword_matrix(4, 8).unwrap();
    let e = EcocEnsemble::from_base(&base, codes).unwrap();
    assert_eq!(e.bottom(), base.bottom());
    assert!(e.branches().iter().all(|b| b.hidden == *base.hidden()));
}

proptest! {
    #[test]
    fn probabilities_form_a_distribution(rho in prop::collection::vec(-10.0f64..10.0, 2..12)) {
        let p = class_probabilities(&rho);
        prop_assert!(p.values.iter().all(|&v| v >= 0.0));
        prop_assert!((p.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(p.degenerate, rho.iter().all(|&r| r <= 0.0));
    }

    #[test]
    fn normalisation_keeps_the_argmax(rho in prop::collection::vec(-10.0f64..10.0, 2..12)) {
        prop_assume!(rho.iter().any(|&r| r > 0.0));
        prop_assert_eq!(argmax(&class_probabilities(&rho).values), argmax(&rho));
    }

    #[test]
    fn prediction_ignores_positive_scaling(z in prop::collection::vec(-3.0f64..3.0, 8), s in 0.01f64..100.0) {
        let codes = build_codeword_matrix(4, 8).unwrap();
        let rho = correlations(&z, &codes).unwrap();
        let scaled: Vec<f64> = rho.iter().map(|r| r * s).collect();
        let p = class_probabilities(&rho);
        let q = class_probabilities(&scaled);
        let pick = |p: &ClassProbabilities, r: &[f64]| if p.degenerate { argmax(r) } else { argmax(&p.values) };
        prop_assert_eq!(pick(&p, &rho), pick(&q, &scaled));
    }
}
