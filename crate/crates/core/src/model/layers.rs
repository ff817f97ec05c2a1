use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Layer stack shared by every branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BottomSpec {
    /// `conv -> relu -> maxpool2x2` per entry of `channels`.
    Conv { channels: Vec<usize>, kernel: usize },
    /// `dense -> relu` per entry of `widths`.
    Dense { widths: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[C, H, W]` for convolutional bottoms, `[D]` for dense ones.
    pub input_shape: Vec<usize>,
    pub bottom: BottomSpec,
    /// Hidden width of the classification head and of every branch.
    pub head_hidden: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Architecture(m.to_string()));
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad("empty input shape");
        }
        if self.head_hidden == 0 {
            return bad("head width must be positive");
        }
        match &self.bottom {
            BottomSpec::Conv { channels, kernel } => {
                if self.input_shape.len() != 3 {
                    return bad("convolutional bottom needs a [C, H, W] input");
                }
                if kernel % 2 == 0 {
                    return bad("kernel size must be odd");
                }
                if channels.is_empty() || channels.contains(&0) {
                    return bad("convolution channels must be positive");
                }
                let shrink = 1usize << channels.len();
                if self.input_shape[1] < shrink || self.input_shape[2] < shrink {
                    return bad("too many pooling stages for the input size");
                }
            }
            BottomSpec::Dense { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return bad("dense widths must be positive");
                }
            }
        }
        Ok(())
    }

    /// Length of the flattened shared-bottom output.
    pub fn feature_len(&self) -> usize {
        match &self.bottom {
            BottomSpec::Conv { channels, .. } => {
                let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
                for _ in channels {
                    h /= 2;
                    w /= 2;
                }
                channels.last().copied().unwrap_or(0) * h * w
            }
            BottomSpec::Dense { widths } => widths.last().copied().unwrap_or(0),
        }
    }
}

/// Binds parameter tensors onto a tape, either as trainable leaves or as
/// constants. Trainable bindings are kept in binding order.
pub(crate) struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    pub(crate) bound: Vec<Var<'t>>,
}

impl<'t> Binder<'t> {
    pub(crate) fn frozen(tape: &'t Tape) -> Self {
        Self {
            tape,
            trainable: false,
            bound: Vec::new(),
        }
    }

    pub(crate) fn trainable(tape: &'t Tape) -> Self {
        Self {
            tape,
            trainable: true,
            bound: Vec::new(),
        }
    }

    pub(crate) fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn bind(&mut self, p: &Arc<Tensor>) -> Result<Var<'t>, TensorError> {
        if self.trainable {
            let v = self.tape.var(Arc::clone(p))?;
            self.bound.push(v);
            Ok(v)
        } else {
            self.tape.constant(Arc::clone(p))
        }
    }
}

fn gaussian(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Fully connected layer, weight `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
}

impl Dense {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Arc::new(gaussian(rng, vec![fan_in, fan_out], fan_in)),
            bias: Arc::new(Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Arc::new(Tensor::zeros(vec![fan_in, fan_out])),
            bias: Arc::new(Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn forward<'t>(&self, binder: &mut Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let w = binder.bind(&self.weight)?;
        let b = binder.bind(&self.bias)?;
        x.matmul(w)?.bias_add(b)
    }


    pub(crate) fn params(&self) -> [&Arc<Tensor>; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { kernel: Arc<Tensor>, bias: Arc<Tensor> },
    Dense(Dense),
}

/// Parameters of the layers common to all ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedBottom {
    pub layers: Vec<Layer>,
}

impl SharedBottom {
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Self {
        let layers = match &arch.bottom {
            BottomSpec::Conv { channels, kernel } => {
                let mut in_ch = arch.input_shape[0];
                channels
                    .iter()
                    .map(|&out_ch| {
                        let fan_in = in_ch * kernel * kernel;
                        let k = gaussian(rng, vec![out_ch, in_ch, *kernel, *kernel], fan_in);
                        in_ch = out_ch;
                        Layer::Conv {
                            kernel: Arc::new(k),
                            bias: Arc::new(Tensor::zeros(vec![out_ch])),
                        }
                    })
                    .collect()
            }
            BottomSpec::Dense { widths } => {
                let mut fan_in: usize = arch.input_shape.iter().product();
                widths
                    .iter()
                    .map(|&w| {
                        let d = Dense::init(rng, fan_in, w);
                        fan_in = w;
                        Layer::Dense(d)
                    })
                    .collect()
            }
        };
        Self { layers }
    }

    /// Flattened features `[B, F]` for an input batch `[B, ..]`.
    pub(crate) fn forward<'t>(&self, binder: &mut Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let mut h = x;
        let mut flattened = false;
        for layer in &self.layers {
            match layer {
                Layer::Conv { kernel, bias } => {
                    let k = binder.bind(kernel)?;
                    let b = binder.bind(bias)?;
                    h = h.conv2d(k, b)?.relu()?.maxpool2x2()?;
                }
                Layer::Dense(d) => {
                    if !flattened {
                        h = h.flatten()?;
                        flattened = true;
                    }
                    h = d.forward(binder, h)?.relu()?;
                }
            }
        }
        if !flattened {
            h = h.flatten()?;
        }
        Ok(h)
    }


    pub(crate) fn params(&self) -> Vec<&Arc<Tensor>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { kernel, bias } => {
                    out.push(kernel);
                    out.push(bias);
                }
                Layer::Dense(d) => out.extend(d.params()),
            }
        }
        out
    }

    /// Parameter shapes in binding order, used to validate loaded blocks.
    pub(crate) fn expected_shapes(arch: &Architecture) -> Vec<Vec<usize>> {
        match &arch.bottom {
            BottomSpec::Conv { channels, kernel } => {
                let mut in_ch = arch.input_shape[0];
                let mut out = Vec::new();
                for &c in channels {
                    out.push(vec![c, in_ch, *kernel, *kernel]);
                    out.push(vec![c]);
                    in_ch = c;
                }
                out
            }
            BottomSpec::Dense { widths } => {
                let mut fan_in: usize = arch.input_shape.iter().product();
                let mut out = Vec::new();
                for &w in widths {
                    out.push(vec![fan_in, w]);
                    out.push(vec![w]);
                    fan_in = w;
                }
                out
            }
        }
    }

    pub(crate) fn from_params(arch: &Architecture, mut params: std::vec::IntoIter<Arc<Tensor>>) -> Self {
        let n = match &arch.bottom {
            BottomSpec::Conv { channels, .. } => channels.len(),
            BottomSpec::Dense { widths } => widths.len(),
        };
        let conv = matches!(arch.bottom, BottomSpec::Conv { .. });
        let layers = (0..n)
            .map(|_| {
                let a = params.next().expect("validated count");
                let b = params.next().expect("validated count");
                if conv {
                    Layer::Conv { kernel: a, bias: b }
                } else {
                    Layer::Dense(Dense { weight: a, bias: b })
                }
            })
            .collect();
        Self { layers }
    }
}
