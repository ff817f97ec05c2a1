//! Classifiers and the maps from logits to class probabilities.
//!
//! One-hot models use softmax over `M` logits. ECOC models emit `N` logits,
//! activate them with `tanh`, correlate with every codeword
//! (`ρ = tanh(z) · Cᵀ`) and normalise the positive part of `ρ`.

mod checkpoint;
mod ensemble;
mod layers;
mod linear;
mod onehot;

pub use checkpoint::{load_checkpoint, save_checkpoint, Model, ModelKind, CHECKPOINT_MAGIC};
pub use ensemble::{Branch, EcocEnsemble};
pub use layers::{Architecture, BottomSpec, Dense, Layer, SharedBottom};
pub use linear::LinearModel;
pub use onehot::OneHotModel;

pub(crate) use layers::Binder;

use crate::codes::{CodesError, CodewordMatrix};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codes(#[from] CodesError),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(String),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Elementwise activation applied before correlating with codewords.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Only used to relate the ECOC map to softmax under the identity code.
    Exp,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Exp => v.exp(),
        }
    }
}

/// `ρ_k = tanh(z) · C_k` for every class.
pub fn correlations(logits: &[f64], codewords: &CodewordMatrix) -> Result<Vec<f64>, ModelError> {
    correlations_with(logits, codewords, Activation::Tanh)
}

pub fn correlations_with(
    logits: &[f64],
    codewords: &CodewordMatrix,
    activation: Activation,
) -> Result<Vec<f64>, ModelError> {
    if logits.len() != codewords.length() {
        return Err(ModelError::Length(format!(
            "{} logits for codewords of length {}",
            logits.len(),
            codewords.length()
        )));
    }
    let activated: Vec<f64> = logits.iter().map(|&z| activation.apply(z)).collect();
    Ok(codewords
        .rows()
        .map(|row| activated.iter().zip(row).map(|(a, &c)| a * f64::from(c)).sum())
        .collect())
}

/// Normalised positive-part correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    pub values: Vec<f64>,
    /// Every correlation was `<= 0`; `values` is then uniform.
    pub degenerate: bool,
}

pub fn class_probabilities(correlations: &[f64]) -> ClassProbabilities {
    let total: f64 = correlations.iter().map(|r| r.max(0.0)).sum();
    if total > 0.0 {
        ClassProbabilities {
            values: correlations.iter().map(|r| r.max(0.0) / total).collect(),
            degenerate: false,
        }
    } else {
        let m = correlations.len() as f64;
        ClassProbabilities {
            values: vec![1.0 / m; correlations.len()],
            degenerate: true,
        }
    }
}

pub fn softmax_probabilities(logits: &[f64]) -> Vec<f64> {
    crate::tensor::tape_softmax_row(logits)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// How a classifier's logits become class scores.
#[derive(Debug, Clone, Copy)]
pub enum Decoder<'a> {
    Softmax { classes: usize },
    Ecoc(&'a CodewordMatrix),
}

/// Decoded output of a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// ECOC only.
    pub correlations: Option<Vec<f64>>,
    pub degenerate: bool,
    pub predicted: usize,
}

impl Decoder<'_> {
    pub fn classes(&self) -> usize {
        match self {
            Decoder::Softmax { classes } => *classes,
            Decoder::Ecoc(c) => c.classes(),
        }
    }

    pub fn logit_len(&self) -> usize {
        match self {
            Decoder::Softmax { classes } => *classes,
            Decoder::Ecoc(c) => c.length(),
        }
    }

    pub fn codewords(&self) -> Option<&CodewordMatrix> {
        match self {
            Decoder::Softmax { .. } => None,
            Decoder::Ecoc(c) => Some(c),
        }
    }

    pub fn decode(&self, logits: &[f64]) -> Result<Scores, ModelError> {
        match self {
            Decoder::Softmax { classes } => {
                if logits.len() != *classes {
                    return Err(ModelError::Length(format!("{} logits for {classes} classes", logits.len())));
                }
                let probabilities = softmax_probabilities(logits);
                let predicted = argmax(&probabilities);
                Ok(Scores {
                    logits: logits.to_vec(),
                    probabilities,
                    correlations: None,
                    degenerate: false,
                    predicted,
                })
            }
            Decoder::Ecoc(codes) => {
                let rho = correlations(logits, codes)?;
                let p = class_probabilities(&rho);
                // Degenerate normalisation falls back to the raw correlations.
                let predicted = if p.degenerate { argmax(&rho) } else { argmax(&p.values) };
                Ok(Scores {
                    logits: logits.to_vec(),
                    probabilities: p.values,
                    correlations: Some(rho),
                    degenerate: p.degenerate,
                    predicted,
                })
            }
        }
    }
}

/// A differentiable classifier over fixed-shape inputs with pixels in `[0, 1]`.
pub trait Classifier: Sync {
    /// Shape of one input, without the batch axis.
    fn input_shape(&self) -> &[usize];

    fn decoder(&self) -> Decoder<'_>;

    /// Logits `[B, L]` for a batch `[B, ..input_shape]` recorded on `tape`.
    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError>;

    fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    /// Reshapes a single input or a flat batch to `[B, ..input_shape]`.
    fn batch_shape(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        let per = self.input_len();
        let ok = x.shape() == self.input_shape()
            || (x.shape().len() == self.input_shape().len() + 1 && &x.shape()[1..] == self.input_shape());
        if !ok || per == 0 || x.len() % per != 0 {
            return Err(ModelError::InputShape {
                expected: self.input_shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        let mut shape = vec![x.len() / per];
        shape.extend_from_slice(self.input_shape());
        Ok(shape)
    }

    /// Logits for a single input or a batch, `[B, L]`.
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let shape = self.batch_shape(x)?;
        let tape = Tape::new();
        let input = tape.constant(x.clone().reshape(shape)?)?;
        let out = self.logits_on(&tape, input)?;
        Ok((*out.value()).clone())
    }

    fn scores(&self, x: &Tensor) -> Result<Scores, ModelError> {
        let z = self.logits(x)?;
        self.decoder().decode(z.data())
    }

    fn predict(&self, x: &Tensor) -> Result<usize, ModelError> {
        Ok(self.scores(x)?.predicted)
    }

    /// Predictions for a flat batch, evaluated in chunks.
    fn predict_many(&self, images: &[f64]) -> Result<Vec<usize>, ModelError> {
        let per = self.input_len();
        let decoder = self.decoder();
        let width = decoder.logit_len();
        let mut out = Vec::with_capacity(images.len() / per.max(1));
        for chunk in images.chunks(per * 256) {
            let mut shape = vec![chunk.len() / per];
            shape.extend_from_slice(self.input_shape());
            let z = self.logits(&Tensor::new(shape, chunk.to_vec())?)?;
            for row in z.data().chunks(width) {
                out.push(decoder.decode(row)?.predicted);
            }
        }
        Ok(out)
    }
}
