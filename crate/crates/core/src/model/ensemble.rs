use std::sync::Arc;

use rand::Rng;

use super::layers::{Architecture, Binder, Dense, SharedBottom};
use super::onehot::OneHotModel;
use super::{Classifier, Decoder, ModelError};
use crate::codes::CodewordMatrix;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// One ensemble member: `features -> dense -> relu -> dense -> one logit`.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub hidden: Dense,
    /// Weight `[h, 1]`.
    pub output: Dense,
}

impl Branch {
    pub(crate) fn forward<'t>(&self, binder: &mut Binder<'t>, features: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = self.hidden.forward(binder, features)?.relu()?;
        self.output.forward(binder, h)
    }

}

/// All branches' parameters packed for a single batched pass.
#[derive(Debug, Clone, PartialEq)]
struct FusedBranches {
    hidden_weight: Arc<Tensor>,
    hidden_bias: Arc<Tensor>,
    output_weight: Arc<Tensor>,
    output_bias: Arc<Tensor>,
}

impl FusedBranches {
    fn pack(branches: &[Branch]) -> Self {
        let features = branches[0].hidden.fan_in();
        let width = branches[0].hidden.fan_out();
        let n = branches.len();
        let mut hw = vec![0.0; features * n * width];
        let mut hb = Vec::with_capacity(n * width);
        let mut ow = Vec::with_capacity(n * width);
        let mut ob = Vec::with_capacity(n);
        for (g, b) in branches.iter().enumerate() {
            let w = b.hidden.weight.data();
            for f in 0..features {
                hw[f * n * width + g * width..f * n * width + (g + 1) * width]
                    .copy_from_slice(&w[f * width..(f + 1) * width]);
            }
            hb.extend_from_slice(b.hidden.bias.data());
            ow.extend_from_slice(b.output.weight.data());
            ob.push(b.output.bias.item());
        }
        Self {
            hidden_weight: Arc::new(Tensor::new(vec![features, n * width], hw).expect("shape")),
            hidden_bias: Arc::new(Tensor::vector(hb)),
            output_weight: Arc::new(Tensor::new(vec![n, width], ow).expect("shape")),
            output_bias: Arc::new(Tensor::vector(ob)),
        }
    }
}

/// Shared bottom feeding `N` single-bit branches, decoded against a codeword
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EcocEnsemble {
    arch: Architecture,
    codewords: CodewordMatrix,
    bottom: SharedBottom,
    branches: Vec<Branch>,
    fused: FusedBranches,
}

impl EcocEnsemble {
    pub fn new(
        arch: Architecture,
        codewords: CodewordMatrix,
        bottom: SharedBottom,
        branches: Vec<Branch>,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        if branches.len() != codewords.length() {
            return Err(ModelError::Architecture(format!(
                "{} branches for codewords of length {}",
                branches.len(),
                codewords.length()
            )));
        }
        let f = arch.feature_len();
        for b in &branches {
            if b.hidden.weight.shape() != [f, arch.head_hidden] || b.output.weight.shape() != [arch.head_hidden, 1] {
                return Err(ModelError::Architecture("branch parameter shapes disagree".into()));
            }
        }
        let fused = FusedBranches::pack(&branches);
        Ok(Self {
            arch,
            codewords,
            bottom,
            branches,
            fused,
        })
    }

    pub fn init(arch: Architecture, codewords: CodewordMatrix, rng: &mut impl Rng) -> Result<Self, ModelError> {
        arch.validate()?;
        let bottom = SharedBottom::init(&arch, rng);
        let branches = (0..codewords.length())
            .map(|_| Branch {
                hidden: Dense::init(rng, arch.feature_len(), arch.head_hidden),
                output: Dense::init(rng, arch.head_hidden, 1),
            })
            .collect();
        Self::new(arch, codewords, bottom, branches)
    }

    /// Starting point for fine-tuning: the base model's bottom and hidden
    /// layer are copied into every branch, and branch `i` reads out
    /// `Σ_k C_ki z_k / M` from the base class logits.
    pub fn from_base(base: &OneHotModel, codewords: CodewordMatrix) -> Result<Self, ModelError> {
        if codewords.classes() != base.classes() {
            return Err(ModelError::Architecture(format!(
                "{} codewords for a {}-class base model",
                codewords.classes(),
                base.classes()
            )));
        }
        let m = base.classes();
        let width = base.architecture().head_hidden;
        let (w, b) = (base.output().weight.data(), base.output().bias.data());
        let branches = (0..codewords.length())
            .map(|i| {
                let mut ow = vec![0.0; width];
                let mut ob = 0.0;
                for k in 0..m {
                    let c = f64::from(codewords.entry(k, i)) / m as f64;
                    for (j, o) in ow.iter_mut().enumerate() {
                        *o += c * w[j * m + k];
                    }
                    ob += c * b[k];
                }
                Branch {
                    hidden: base.hidden().clone(),
                    output: Dense {
                        weight: Arc::new(Tensor::new(vec![width, 1], ow).expect("shape")),
                        bias: Arc::new(Tensor::vector(vec![ob])),
                    },
                }
            })
            .collect();
        Self::new(base.architecture().clone(), codewords, base.bottom().clone(), branches)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn codewords(&self) -> &CodewordMatrix {
        &self.codewords
    }

    pub fn bottom(&self) -> &SharedBottom {
        &self.bottom
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Replaces one branch and repacks the batched parameters.
    pub fn set_branch(&mut self, index: usize, branch: Branch) -> Result<(), ModelError> {
        let mut branches = self.branches.clone();
        branches[index] = branch;
        *self = Self::new(self.arch.clone(), self.codewords.clone(), self.bottom.clone(), branches)?;
        Ok(())
    }

    pub(crate) fn replace_parts(&mut self, bottom: SharedBottom, branches: Vec<Branch>) -> Result<(), ModelError> {
        *self = Self::new(self.arch.clone(), self.codewords.clone(), bottom, branches)?;
        Ok(())
    }

    pub(crate) fn features<'t>(&self, binder: &mut Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.bottom.forward(binder, x)
    }

    /// Logits `[B, N]` computed one branch at a time.
    pub(crate) fn branchwise<'t>(&self, binder: &mut Binder<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let f = self.features(binder, x)?;
        let parts = self
            .branches
            .iter()
            .map(|b| b.forward(binder, f))
            .collect::<Result<Vec<_>, _>>()?;
        Var::concat_cols(&parts)
    }

    /// Reference path: each branch evaluated separately, then concatenated.
    pub fn logits_branchwise(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let shape = self.batch_shape(x)?;
        let tape = Tape::new();
        let input = tape.constant(x.clone().reshape(shape)?)?;
        let z = self.branchwise(&mut Binder::frozen(&tape), input)?;
        Ok((*z.value()).clone())
    }

    pub(crate) fn named_params(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out: Vec<(String, &Arc<Tensor>)> = self
            .bottom
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, p)| (format!("bottom.{i}"), p))
            .collect();
        for (i, b) in self.branches.iter().enumerate() {
            out.push((format!("branch.{i}.hidden.weight"), &b.hidden.weight));
            out.push((format!("branch.{i}.hidden.bias"), &b.hidden.bias));
            out.push((format!("branch.{i}.output.weight"), &b.output.weight));
            out.push((format!("branch.{i}.output.bias"), &b.output.bias));
        }
        out
    }

    pub(crate) fn expected_shapes(arch: &Architecture, length: usize) -> Vec<Vec<usize>> {
        let mut out = SharedBottom::expected_shapes(arch);
        for _ in 0..length {
            out.push(vec![arch.feature_len(), arch.head_hidden]);
            out.push(vec![arch.head_hidden]);
            out.push(vec![arch.head_hidden, 1]);
            out.push(vec![1]);
        }
        out
    }

    pub(crate) fn from_params(
        arch: Architecture,
        codewords: CodewordMatrix,
        params: Vec<Arc<Tensor>>,
    ) -> Result<Self, ModelError> {
        let n_bottom = SharedBottom::expected_shapes(&arch).len();
        let mut it = params.into_iter();
        let bottom_params: Vec<_> = it.by_ref().take(n_bottom).collect();
        let bottom = SharedBottom::from_params(&arch, bottom_params.into_iter());
        let mut branches = Vec::with_capacity(codewords.length());
        for _ in 0..codewords.length() {
            let mut next = || it.next().expect("validated count");
            let hidden = Dense {
                weight: next(),
                bias: next(),
            };
            let output = Dense {
                weight: next(),
                bias: next(),
            };
            branches.push(Branch { hidden, output });
        }
        Self::new(arch, codewords, bottom, branches)
    }
}

impl Classifier for EcocEnsemble {
    fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    fn decoder(&self) -> Decoder<'_> {
        Decoder::Ecoc(&self.codewords)
    }

    /// Batched path: all branch hidden layers as one matmul, outputs as a
    /// block-diagonal product.
    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let mut binder = Binder::frozen(tape);
        let f = self.features(&mut binder, x)?;
        let hw = binder.bind(&self.fused.hidden_weight)?;
        let hb = binder.bind(&self.fused.hidden_bias)?;
        let ow = binder.bind(&self.fused.output_weight)?;
        let ob = binder.bind(&self.fused.output_bias)?;
        let h = f.matmul(hw)?.bias_add(hb)?.relu()?;
        Ok(h.grouped_linear(ow)?.bias_add(ob)?)
    }
}
