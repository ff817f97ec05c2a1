use std::sync::Arc;

use rand::Rng;

use super::layers::{Architecture, Binder, Dense, SharedBottom};
use super::{Classifier, Decoder, ModelError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Single network with `M` softmax outputs: shared bottom, one hidden dense
/// layer, then the class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotModel {
    arch: Architecture,
    classes: usize,
    pub(crate) bottom: SharedBottom,
    pub(crate) hidden: Dense,
    pub(crate) output: Dense,
}

impl OneHotModel {
    pub fn init(arch: Architecture, classes: usize, rng: &mut impl Rng) -> Result<Self, ModelError> {
        arch.validate()?;
        if classes < 2 {
            return Err(ModelError::Architecture("at least two classes are required".into()));
        }
        let bottom = SharedBottom::init(&arch, rng);
        let hidden = Dense::init(rng, arch.feature_len(), arch.head_hidden);
        let output = Dense::init(rng, arch.head_hidden, classes);
        Ok(Self {
            arch,
            classes,
            bottom,
            hidden,
            output,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bottom(&self) -> &SharedBottom {
        &self.bottom
    }

    pub fn hidden(&self) -> &Dense {
        &self.hidden
    }

    pub fn output(&self) -> &Dense {
        &self.output
    }

    pub(crate) fn forward<'t>(&self, binder: &mut Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let f = self.bottom.forward(binder, x)?;
        let h = self.hidden.forward(binder, f)?.relu()?;
        self.output.forward(binder, h)
    }


    pub(crate) fn named_params(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out: Vec<(String, &Arc<Tensor>)> = self
            .bottom
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| (format!("bottom.{i}"), p))
            .collect();
        out.push(("head.hidden.weight".into(), &self.hidden.weight));
        out.push(("head.hidden.bias".into(), &self.hidden.bias));
        out.push(("head.output.weight".into(), &self.output.weight));
        out.push(("head.output.bias".into(), &self.output.bias));
        out
    }

    pub(crate) fn expected_shapes(arch: &Architecture, classes: usize) -> Vec<Vec<usize>> {
        let mut out = SharedBottom::expected_shapes(arch);
        out.push(vec![arch.feature_len(), arch.head_hidden]);
        out.push(vec![arch.head_hidden]);
        out.push(vec![arch.head_hidden, classes]);
        out.push(vec![classes]);
        out
    }

    pub(crate) fn from_params(arch: Architecture, classes: usize, params: Vec<Arc<Tensor>>) -> Self {
        let n_bottom = SharedBottom::expected_shapes(&arch).len();
        let mut it = params.into_iter();
        let bottom_params: Vec<_> = it.by_ref().take(n_bottom).collect();
        let bottom = SharedBottom::from_params(&arch, bottom_params.into_iter());
        let mut next = || it.next().expect("validated count");
        let hidden = Dense {
            weight: next(),
            bias: next(),
        };
        let output = Dense {
            weight: next(),
            bias: next(),
        };
        Self {
            arch,
            classes,
            bottom,
            hidden,
            output,
        }
    }
}

impl Classifier for OneHotModel {
    fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    fn decoder(&self) -> Decoder<'_> {
        Decoder::Softmax { classes: self.classes }
    }

    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(self.forward(&mut Binder::frozen(tape), x)?)
    }
}
