//! Built-in verification suite run by `ecoc selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attacks::{binary_search_attack, is_adversarial, AttackConfig, AttackError, AttackKind, Objective};
use crate::codes::{build_codeword_matrix, one_hot_matrix, sylvester_hadamard};
use crate::model::{
    class_probabilities, correlations_with, softmax_probabilities, Activation, Architecture, BottomSpec, Classifier,
    EcocEnsemble, LinearModel, OneHotModel,
};
use crate::tensor::{finite_difference_check, InjectedFault, Tape, TapeOptions, Tensor, TensorError, Var};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from_result(name: &'static str, r: Result<String, String>) -> Self {
        match r {
            Ok(detail) => Self { name, passed: true, detail },
            Err(detail) => Self { name, passed: false, detail },
        }
    }
}

/// Runs every check in order.
pub fn run_all() -> Vec<Check> {
    vec![
        Check::from_result("gradients-ops", op_gradients(5, 11, TapeOptions::default())),
        Check::from_result("gradients-objectives", objective_gradients(5, 12, TapeOptions::default())),
        Check::from_result("fault-detected", fault_detected()),
        Check::from_result("hadamard", hadamard_invariants()),
        Check::from_result("probability-map", probability_map()),
        Check::from_result("lambda-trace", lambda_traces()),
        Check::from_result("grid-oracle", grid_oracle(5, 21)),
    ]
}

type Unary = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn constant<'t>(tape: &'t Tape, shape: &[usize], seed: u64) -> Result<Var<'t>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.constant(normal(&mut rng, shape, 1.0))
}

/// Scalar test functions exercising each differentiable op, with the input
/// shape they expect.
pub fn op_cases() -> Vec<(&'static str, Vec<usize>, Unary)> {
    fn sum_mul<'t>(t: &'t Tape, v: Var<'t>) -> Result<Var<'t>, TensorError> {
        let w = constant(t, &v.shape(), 1)?;
        v.mul(w)?.reduce_sum()
    }
    vec![
        ("matmul", vec![3, 4], |t, v| {
            let w = constant(t, &[4, 2], 2)?;
            sum_mul(t, v.matmul(w)?)
        }),
        ("matmul-rhs", vec![4, 2], |t, v| {
            let a = constant(t, &[3, 4], 3)?;
            sum_mul(t, a.matmul(v)?)
        }),
        ("bias-add", vec![3], |t, v| {
            let a = constant(t, &[2, 3], 4)?;
            sum_mul(t, a.bias_add(v)?)
        }),
        ("tanh", vec![5], |t, v| sum_mul(t, v.tanh()?)),
        ("relu", vec![5], |t, v| sum_mul(t, v.relu()?)),
        ("exp", vec![5], |t, v| sum_mul(t, v.exp()?)),
        ("softplus", vec![5], |t, v| sum_mul(t, v.softplus()?)),
        ("conv2d", vec![1, 2, 5, 5], |t, v| {
            let k = constant(t, &[3, 2, 3, 3], 5)?;
            let b = constant(t, &[3], 6)?;
            sum_mul(t, v.conv2d(k, b)?)
        }),
        ("conv2d-kernel", vec![3, 2, 3, 3], |t, v| {
            let x = constant(t, &[2, 2, 4, 4], 7)?;
            let b = constant(t, &[3], 8)?;
            sum_mul(t, x.conv2d(v, b)?)
        }),
        ("maxpool2x2", vec![1, 2, 4, 4], |t, v| sum_mul(t, v.maxpool2x2()?)),
        ("add-sub", vec![4], |t, v| {
            let c = constant(t, &[4], 9)?;
            sum_mul(t, v.add(c)?.sub(v.mul(v)?)?)
        }),
        ("scale-offset", vec![4], |t, v| sum_mul(t, v.scale(-1.7)?.add_scalar(0.3)?)),
        ("reduce-max", vec![6], |_, v| v.reduce_max()),
        ("reduce-min", vec![6], |_, v| v.reduce_min()),
        ("inner-product", vec![6], |t, v| v.inner_product(constant(t, &[6], 10)?)),
        ("softmax", vec![2, 4], |t, v| sum_mul(t, v.softmax()?)),
        ("l2-norm", vec![6], |_, v| v.l2_norm()),
        ("max-min-scalar", vec![6], |_, v| {
            let a = v.reduce_max()?.max_scalar(-0.2)?;
            a.add(v.reduce_min()?.min_scalar(0.2)?)
        }),
        ("gather", vec![2, 3], |t, v| sum_mul(t, v.gather(&[4, 0, 2])?)),
        ("grouped-linear", vec![2, 6], |t, v| {
            let w = constant(t, &[3, 2], 11)?;
            sum_mul(t, v.grouped_linear(w)?)
        }),
        ("concat-cols", vec![2, 3], |t, v| {
            let c = constant(t, &[2, 2], 12)?;
            sum_mul(t, Var::concat_cols(&[v, c, v.tanh()?])?)
        }),
        ("cross-entropy", vec![3, 4], |_, v| v.softmax_cross_entropy(&[0, 3, 1])),
        ("reshape-flatten", vec![2, 2, 3], |t, v| sum_mul(t, v.reshape(vec![4, 3])?.flatten()?)),
    ]
}

/// Worst relative gradient error over `trials` random inputs per op.
pub fn op_gradients(trials: usize, seed: u64, options: TapeOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, "");
    for (name, shape, f) in op_cases() {
        for _ in 0..trials {
            let x = normal(&mut rng, &shape, 1.0);
            let err = finite_difference_check(&f, &x, FD_STEP, options).map_err(|e| format!("{name}: {e}"))?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    if worst.0 <= GRADIENT_TOLERANCE {
        Ok(format!("max relative error {:.2e} ({})", worst.0, worst.1))
    } else {
        Err(format!("{} relative error {:.2e}", worst.1, worst.0))
    }
}

/// A random ECOC ensemble over 6 inputs and its one-hot counterpart.
pub fn tiny_models(seed: u64) -> (EcocEnsemble, OneHotModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture {
        input_shape: vec![6],
        bottom: BottomSpec::Dense { widths: vec![5] },
        head_hidden: 4,
    };
    let codes = build_codeword_matrix(4, 8).expect("valid code");
    let ecoc = EcocEnsemble::init(arch.clone(), codes, &mut rng).expect("valid architecture");
    let onehot = OneHotModel::init(arch, 4, &mut rng).expect("valid architecture");
    (ecoc, onehot)
}

fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    f
}

fn objective_error(objective: &Objective<'_>, at: &Tensor, options: TapeOptions) -> Result<f64, String> {
    let to_tensor = |e: AttackError| match e {
        AttackError::Tensor(t) => t,
        other => TensorError::Shape {
            op: "objective",
            detail: other.to_string(),
        },
    };
    let err = if objective.kind() == AttackKind::CwOneHot {
        let f = scalar_fn(|t, w| objective.record_w(t, w).map(|r| r.0).map_err(to_tensor));
        finite_difference_check(&f, at, FD_STEP, options)
    } else {
        let f = scalar_fn(|t, d| objective.record(t, d).map(|r| r.0).map_err(to_tensor));
        finite_difference_check(&f, at, FD_STEP, options)
    };
    err.map_err(|e| e.to_string())
}

/// Input gradients of the three Lagrangian objectives on random tiny models.
pub fn objective_gradients(trials: usize, seed: u64, options: TapeOptions) -> Result<String, String> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (ecoc, onehot) = tiny_models(seed + trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (trial as u64 + 100));
        let x = Tensor::new(vec![6], (0..6).map(|_| rng.random_range(0.2..0.8)).collect()).expect("shape");
        let at = normal(&mut rng, &[1, 6], 0.1);
        let target = rng.random_range(0..4);
        let lambda = rng.random_range(0.5..5.0);
        let cases: [(&dyn Classifier, AttackKind, f64); 3] = [
            (&ecoc, AttackKind::Proposed, 50.0),
            (&ecoc, AttackKind::CwEcoc, -50.0),
            (&onehot, AttackKind::CwOneHot, -50.0),
        ];
        for (model, kind, c) in cases {
            let objective = Objective::new(model, &x, target, kind, lambda, c).map_err(|e| e.to_string())?;
            let err = objective_error(&objective, &at, options)?;
            if err > GRADIENT_TOLERANCE {
                return Err(format!("{kind} relative error {err:.2e} in trial {trial}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("max relative error {worst:.2e}"))
}

/// A flipped tanh derivative must be caught by the gradient check.
pub fn fault_detected() -> Result<String, String> {
    let options = TapeOptions {
        checked: false,
        fault: Some(InjectedFault::FlipTanhGradient),
    };
    match op_gradients(1, 3, options) {
        Err(detail) => Ok(format!("caught: {detail}")),
        Ok(_) => Err("flipped tanh gradient went unnoticed".into()),
    }
}

pub fn hadamard_invariants() -> Result<String, String> {
    let h = sylvester_hadamard(4).map_err(|e| e.to_string())?;
    for (i, a) in h.iter().enumerate() {
        for (j, b) in h.iter().enumerate() {
            let dot: i32 = a.iter().zip(b).map(|(&x, &y)| i32::from(x) * i32::from(y)).sum();
            if dot != if i == j { 16 } else { 0 } {
                return Err(format!("H H^T entry ({i},{j}) is {dot}"));
            }
        }
    }
    let d = build_codeword_matrix(10, 16).map_err(|e| e.to_string())?.min_hamming_distance();
    if d != 8 {
        return Err(format!("10x16 code has min distance {d}"));
    }
    let full = build_codeword_matrix(32, 32).map_err(|e| e.to_string())?;
    if full.rows().zip(sylvester_hadamard(5).unwrap()).any(|(a, b)| a != b.as_slice()) {
        return Err("32x32 code is not the full Hadamard matrix".into());
    }
    Ok("H16 orthogonal, d(10x16) = 8".into())
}

/// Codeword-exact activations give probability one, and the identity code
/// with `exp` reproduces softmax.
pub fn probability_map() -> Result<String, String> {
    let codes = build_codeword_matrix(10, 16).map_err(|e| e.to_string())?;
    for k in 0..codes.classes() {
        let rho: Vec<f64> = codes
            .rows()
            .map(|row| row.iter().zip(codes.row(k)).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum())
            .collect();
        let p = class_probabilities(&rho).values[k];
        if (p - 1.0).abs() > 1e-9 {
            return Err(format!("codeword {k} maps to probability {p}"));
        }
    }
    let identity = one_hot_matrix(7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let z = normal(&mut rng, &[7], 3.0);
        let rho = correlations_with(z.data(), &identity, Activation::Exp).map_err(|e| e.to_string())?;
        let p = class_probabilities(&rho).values;
        let s = softmax_probabilities(z.data());
        worst = p.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    if worst > 1e-12 {
        return Err(format!("identity code differs from softmax by {worst:.2e}"));
    }
    Ok(format!("softmax gap {worst:.1e}"))
}

/// A 2-pixel linear ECOC model with constant logits `bias`.
pub fn constant_stub(bias: Vec<f64>) -> LinearModel {
    let codes = build_codeword_matrix(2, 4).expect("valid code");
    LinearModel::ecoc(Tensor::zeros(vec![2, 4]), bias, codes).expect("valid stub")
}

/// `λ` per round for a model that never changes its answer.
pub fn lambda_trace(model: &LinearModel, target: usize, lambda: f64, rounds: usize) -> Result<Vec<(f64, f64, f64)>, AttackError> {
    let config = AttackConfig::new(AttackKind::Proposed, lambda, rounds, 3, 0.0);
    let x = Tensor::vector(vec![0.5, 0.5]);
    let r = binary_search_attack(model, &x, target, &config)?;
    Ok(r.rounds.iter().map(|t| (t.lambda, t.upper, t.lower)).collect())
}

pub fn lambda_traces() -> Result<String, String> {
    // Both stubs decode to class 0 (codeword [1, -1, 1, -1]).
    let class0 = constant_stub(vec![1.0, -1.0, 1.0, -1.0]);
    let never = lambda_trace(&class0, 1, 1e-3, 4).map_err(|e| e.to_string())?;
    let lambdas: Vec<f64> = never.iter().map(|t| t.0).collect();
    let expected = [1e-3, 1e-3 * 10.0, 1e-3 * 10.0 * 10.0, 1e-3 * 10.0 * 10.0 * 10.0];
    if lambdas != expected {
        return Err(format!("never-adversarial trace {lambdas:?}"));
    }
    // δ = 0 is adversarial from the first check, so only round one improves
    // on the best norm; later rounds raise the lower bound towards λ₁.
    let always = lambda_trace(&class0, 0, 1.0, 4).map_err(|e| e.to_string())?;
    let expected = [(1.0, 1.0, 0.0), (0.5, 1.0, 0.5), (0.75, 1.0, 0.75), (0.875, 1.0, 0.875)];
    if always != expected {
        return Err(format!("always-adversarial trace {always:?}"));
    }
    Ok("x10 growth and bisection match".into())
}

/// A random 2-pixel, 2-class linear ECOC model, a clean input it does not
/// already classify as the target, and the target.
pub fn grid_instance(seed: u64) -> (LinearModel, Tensor, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = build_codeword_matrix(2, 4).expect("valid code");
    loop {
        let weight = normal(&mut rng, &[2, 4], 2.0);
        let bias = normal(&mut rng, &[4], 1.0).into_data();
        let model = LinearModel::ecoc(weight, bias, codes.clone()).expect("valid model");
        let x = Tensor::vector(vec![rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]);
        let target = 1 - model.predict(&x).expect("valid input");
        if !is_adversarial(&model, &x, target, 0.0, AttackKind::Proposed).expect("valid input") {
            return (model, x, target);
        }
    }
}

/// Smallest `‖δ‖` over the grid of pixel values with spacing `step` that is
/// adversarial, or `None`.
pub fn grid_minimum(model: &LinearModel, x: &Tensor, target: usize, step: f64) -> Option<f64> {
    let n = (1.0 / step).round() as usize;
    let mut best: Option<f64> = None;
    for i in 0..=n {
        for j in 0..=n {
            let p = [i as f64 * step, j as f64 * step];
            let d = ((p[0] - x.data()[0]).powi(2) + (p[1] - x.data()[1]).powi(2)).sqrt();
            if best.is_some_and(|b| d >= b) {
                continue;
            }
            let adv = Tensor::vector(p.to_vec());
            if is_adversarial(model, &adv, target, 0.0, AttackKind::Proposed).unwrap_or(false) {
                best = Some(d);
            }
        }
    }
    best
}

pub fn grid_oracle(instances: usize, seed: u64) -> Result<String, String> {
    let config = AttackConfig::new(AttackKind::Proposed, 1e-3, 10, 1000, 0.0);
    let mut worst = 0.0f64;
    for k in 0..instances {
        let (model, x, target) = grid_instance(seed + k as u64);
        let oracle = grid_minimum(&model, &x, target, 0.005);
        let r = binary_search_attack(&model, &x, target, &config).map_err(|e| e.to_string())?;
        match (oracle, r.success) {
            (None, false) => {}
            (Some(g), true) => {
                let rel = (r.l2_norm - g).abs() / g;
                if rel > 0.1 {
                    return Err(format!("instance {k}: attack {:.4} vs grid {g:.4}", r.l2_norm));
                }
                worst = worst.max(rel);
            }
            (g, s) => return Err(format!("instance {k}: grid {g:?}, attack success {s}")),
        }
    }
    Ok(format!("worst relative gap {worst:.3}"))
}
