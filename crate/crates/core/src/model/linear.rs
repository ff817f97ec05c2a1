use std::sync::Arc;

use super::{Classifier, Decoder, ModelError};
use crate::codes::CodewordMatrix;
use crate::tensor::{Tape, Tensor, Var};

/// `z = x W + b` over flat inputs, decoded by softmax or against codewords.
///
/// Small enough that attack optima can be found by brute force, which makes
/// it the substrate for the optimizer oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    input_shape: Vec<usize>,
    weight: Arc<Tensor>,
    bias: Arc<Tensor>,
    codewords: Option<CodewordMatrix>,
}

impl LinearModel {
    /// `weight` is `[D, N]`, `bias` has length `N` equal to the code length.
    pub fn ecoc(weight: Tensor, bias: Vec<f64>, codewords: CodewordMatrix) -> Result<Self, ModelError> {
        Self::build(weight, bias, Some(codewords))
    }

    /// `weight` is `[D, M]`.
    pub fn one_hot(weight: Tensor, bias: Vec<f64>) -> Result<Self, ModelError> {
        Self::build(weight, bias, None)
    }

    fn build(weight: Tensor, bias: Vec<f64>, codewords: Option<CodewordMatrix>) -> Result<Self, ModelError> {
        if weight.shape().len() != 2 || weight.shape()[1] != bias.len() {
            return Err(ModelError::Length(format!(
                "weight {:?} with {} biases",
                weight.shape(),
                bias.len()
            )));
        }
        if let Some(c) = &codewords {
            if c.length() != bias.len() {
                return Err(ModelError::Length(format!(
                    "{} outputs for codewords of length {}",
                    bias.len(),
                    c.length()
                )));
            }
        } else if bias.len() < 2 {
            return Err(ModelError::Architecture("at least two classes are required".into()));
        }
        Ok(Self {
            input_shape: vec![weight.shape()[0]],
            weight: Arc::new(weight),
            bias: Arc::new(Tensor::vector(bias)),
            codewords,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        self.bias.data()
    }
}

impl Classifier for LinearModel {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn decoder(&self) -> Decoder<'_> {
        match &self.codewords {
            Some(c) => Decoder::Ecoc(c),
            None => Decoder::Softmax {
                classes: self.bias.len(),
            },
        }
    }

    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let w = tape.constant(Arc::clone(&self.weight))?;
        let b = tape.constant(Arc::clone(&self.bias))?;
        Ok(x.flatten()?.matmul(w)?.bias_add(b)?)
    }
}
