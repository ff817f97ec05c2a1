#![allow(dead_code)]

use ecoc::codes::{build_codeword_matrix, CodewordMatrix};
use ecoc::model::{Architecture, BottomSpec, EcocEnsemble, OneHotModel};
use ecoc::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of `f` at `x`.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a − b| / max(1e-12, |a| + |b|)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Value and tape gradient of a scalar function of one variable.
pub fn value_and_gradient<F>(f: &F, x: &Tensor) -> (f64, Tensor)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let v = tape.var(x.clone()).unwrap();
    let out = f(&tape, v).unwrap();
    (out.item(), tape.gradients(out).unwrap().wrt(v))
}

pub fn value_of<F>(f: &F, x: &Tensor) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    f(&tape, v).unwrap().item()
}

/// Tape gradient against this file's central differences.
pub fn gradient_error<F>(f: &F, x: &Tensor, h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let (_, g) = value_and_gradient(f, x);
    let numeric = central_difference(|p| value_of(f, p), x, h);
    max_relative_error(g.data(), &numeric)
}

pub fn dense_arch(inputs: usize) -> Architecture {
    Architecture {
        input_shape: vec![inputs],
        bottom: BottomSpec::Dense { widths: vec![5] },
        head_hidden: 4,
    }
}

/// Random 4-class ensemble over `[6]` inputs with 8-bit codewords.
pub fn tiny_ecoc(seed: u64) -> EcocEnsemble {
    EcocEnsemble::init(dense_arch(6), build_codeword_matrix(4, 8).unwrap(), &mut rng(seed)).unwrap()
}

pub fn tiny_onehot(seed: u64) -> OneHotModel {
    OneHotModel::init(dense_arch(6), 4, &mut rng(seed)).unwrap()
}

/// Pins a closure to the higher-ranked signature the tape helpers expect.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    f
}

/// Rows 1 and 2 of the order-4 Hadamard matrix.
pub fn codes24() -> CodewordMatrix {
    build_codeword_matrix(2, 4).unwrap()
}

/// Argmax of `ρ` (lowest index on ties), which is how the decoder predicts.
pub fn ecoc_prediction(z: &[f64], c: &CodewordMatrix) -> usize {
    let rho: Vec<f64> = (0..c.classes())
        .map(|k| z.iter().zip(c.row(k)).map(|(v, &b)| v.tanh() * f64::from(b)).sum())
        .collect();
    let mut best = 0;
    for k in 1..rho.len() {
        if rho[k] > rho[best] {
            best = k;
        }
    }
    best
}

pub fn linear_logits(w: &Tensor, b: &[f64], p: &[f64]) -> Vec<f64> {
    let n = b.len();
    (0..n)
        .map(|j| b[j] + p.iter().enumerate().map(|(i, v)| v * w.data()[i * n + j]).sum::<f64>())
        .collect()
}

pub fn proposed_success(w: &Tensor, b: &[f64], c: &CodewordMatrix, p: &[f64], target: usize) -> bool {
    let z = linear_logits(w, b, p);
    ecoc_prediction(&z, c) == target
        && z.iter().zip(c.row(target)).all(|(v, &t)| 2.0 * f64::from(t) * v >= 0.0)
}

/// A random 2-pixel linear ECOC model `(W, b)`, a clean input and a target
/// the input does not already satisfy.
pub fn grid_case(seed: u64) -> (Tensor, Vec<f64>, Tensor, usize) {
    let c = codes24();
    let mut r = rng(1000 + seed);
    loop {
        let w = normal(&mut r, &[2, 4], 2.0);
        let b = normal(&mut r, &[4], 1.0).into_data();
        let x = uniform(&mut r, &[2], 0.1, 0.9);
        let target = 1 - ecoc_prediction(&linear_logits(&w, &b, x.data()), &c);
        if !proposed_success(&w, &b, &c, x.data(), target) {
            return (w, b, x, target);
        }
    }
}

/// Smallest `‖δ‖` over the grid `δ ∈ [−1, 1]²` with spacing `step`, keeping
/// `x + δ` inside the pixel box, that the proposed criterion at `c = 0`
/// accepts; `+∞` if none.
pub fn grid_minimum(w: &Tensor, b: &[f64], c: &CodewordMatrix, x: &Tensor, target: usize, step: f64) -> f64 {
    let steps = (2.0 / step).round() as usize;
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps {
            let d = [-1.0 + i as f64 * step, -1.0 + j as f64 * step];
            let p = [x.data()[0] + d[0], x.data()[1] + d[1]];
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                continue;
            }
            let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if norm < best && proposed_success(w, b, c, &p, target) {
                best = norm;
            }
        }
    }
    best
}
