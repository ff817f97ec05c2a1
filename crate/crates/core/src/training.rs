//! Minibatch gradient descent for the base classifier and the ensemble.
//!
//! The base network is trained with softmax cross-entropy. The ensemble is
//! then initialised from it and every branch is fitted to its own code bit
//! with the logistic loss `log(1 + exp(-t z))`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::CodewordMatrix;
use crate::data::{DataError, Dataset};
use crate::model::{Architecture, Binder, Branch, Classifier, Decoder, Dense, EcocEnsemble, ModelError, OneHotModel};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    Empty,
    #[error("non-finite loss in {stage}, epoch {epoch}")]
    NonFinite { stage: &'static str, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitLoss {
    /// `log(1 + exp(-t z))`.
    Logistic,
}

/// How the shared bottom is treated while the branches are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BottomMode {
    /// Bottom fixed at the base model's weights; branches train independently.
    Frozen,
    /// Bottom and branches updated jointly.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `0` for plain gradient descent.
    pub momentum: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub bit_loss: BitLoss,
    pub bottom: BottomMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            validation_fraction: 0.1,
            bit_loss: BitLoss::Logistic,
            bottom: BottomMode::Frozen,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation fraction must lie strictly between 0 and 1");
        }
        Ok(())
    }
}

/// One line of training progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub error: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,error";

    /// `epoch,split,loss,error`; the split is prefixed with the stage.
    pub fn csv_line(&self) -> String {
        format!("{},{}-{},{},{}", self.epoch, self.stage, self.split, self.loss, self.error)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub train_error: f64,
    pub validation_error: f64,
}

/// Bitwise logistic loss on the margin `t z`.
pub fn per_bit_loss(logit: f64, target_bit: f64) -> f64 {
    crate::tensor::softplus(-target_bit * logit)
}

/// Misclassification fraction under [`Classifier::predict_many`].
pub fn evaluate_error_rate(model: &dyn Classifier, data: &Dataset) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let predicted = model.predict_many(data.images())?;
    let wrong = predicted.iter().zip(data.labels()).filter(|(p, l)| p != l).count();
    Ok(wrong as f64 / data.len() as f64)
}

struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(config: &TrainConfig, params: &[Arc<Tensor>]) -> Self {
        Self {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn step(&mut self, params: &mut [Arc<Tensor>], grads: &[Tensor]) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let p = Arc::make_mut(p);
            for ((w, &d), u) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *u = self.momentum * *u + d;
                *w -= self.learning_rate * *u;
            }
        }
    }
}

fn batch_tensor(data: &Dataset, indices: &[usize]) -> Result<Tensor, TensorError> {
    let mut flat = Vec::with_capacity(indices.len() * data.pixels_per_image());
    for &i in indices {
        flat.extend_from_slice(data.image(i));
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(data.shape());
    Tensor::new(shape, flat)
}

fn rows_of(matrix: &Tensor, indices: &[usize]) -> Result<Tensor, TensorError> {
    let width = matrix.shape()[1];
    let mut flat = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        flat.extend_from_slice(&matrix.data()[i * width..(i + 1) * width]);
    }
    Tensor::new(vec![indices.len(), width], flat)
}

/// One pass of minibatch descent. `loss` records the batch loss given the
/// trainable binder; it must bind parameters in the order of `params`.
fn sgd_epoch<F>(
    params: &mut [Arc<Tensor>],
    sgd: &mut Sgd,
    order: &[usize],
    batch_size: usize,
    loss: F,
) -> Result<f64, TrainError>
where
    F: for<'t> Fn(&[Arc<Tensor>], &mut Binder<'t>, &[usize]) -> Result<Var<'t>, TensorError>,
{
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let tape = Tape::new();
        let mut binder = Binder::trainable(&tape);
        let l = loss(params, &mut binder, batch)?;
        let value = l.item();
        if !value.is_finite() {
            return Ok(f64::NAN);
        }
        total += value * batch.len() as f64;
        let mut grads = tape.gradients(l)?;
        let g: Vec<Tensor> = binder.bound.iter().map(|&v| grads.take(v)).collect();
        sgd.step(params, &g);
    }
    Ok(total / order.len() as f64)
}

fn split_train_validation(data: &Dataset, config: &TrainConfig) -> Result<(Dataset, Dataset), TrainError> {
    let mut parts = data.split(&[1.0 - config.validation_fraction, config.validation_fraction], config.seed)?;
    let validation = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, validation))
}

fn record(stage: &str, epoch: usize, split: &str, loss: f64, error: f64) -> EpochRecord {
    EpochRecord {
        stage: stage.to_string(),
        epoch,
        split: split.to_string(),
        loss,
        error,
    }
}

fn cross_entropy_of(model: &OneHotModel, data: &Dataset) -> Result<(f64, f64), TrainError> {
    let mut loss = 0.0;
    let mut wrong = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(256) {
        let tape = Tape::new();
        let x = tape.constant(batch_tensor(data, chunk)?)?;
        let z = model.forward(&mut Binder::frozen(&tape), x)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
        loss += z.softmax_cross_entropy(&labels)?.item() * chunk.len() as f64;
        let zv = z.value();
        for (row, &l) in zv.data().chunks(model.classes()).zip(&labels) {
            if crate::model::argmax(row) != l {
                wrong += 1;
            }
        }
    }
    Ok((loss / data.len() as f64, wrong as f64 / data.len() as f64))
}

/// Trains the `M`-class softmax network. A validation part of
/// `config.validation_fraction` is held out by seed.
pub fn train_base(
    data: &Dataset,
    arch: &Architecture,
    config: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<(OneHotModel, TrainReport), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    if data.shape() != arch.input_shape.as_slice() {
        return Err(ModelError::InputShape {
            expected: arch.input_shape.clone(),
            got: data.shape().to_vec(),
        }
        .into());
    }
    let (train, validation) = split_train_validation(data, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = OneHotModel::init(arch.clone(), data.classes(), &mut rng)?;
    let mut params: Vec<Arc<Tensor>> = init.named_params().into_iter().map(|(_, p)| Arc::clone(p)).collect();
    let mut sgd = Sgd::new(config, &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let rebuild = |params: &[Arc<Tensor>]| OneHotModel::from_params(arch.clone(), data.classes(), params.to_vec());
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mean = sgd_epoch(&mut params, &mut sgd, &order, config.batch_size, |p, binder, batch| {
            let x = binder_constant(binder, batch_tensor(&train, batch)?)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.label(i)).collect();
            rebuild(p).forward(binder, x)?.softmax_cross_entropy(&labels)
        })?;
        if !mean.is_finite() {
            return Err(TrainError::NonFinite { stage: "base", epoch });
        }
        let model = rebuild(&params);
        let (train_loss, train_error) = cross_entropy_of(&model, &train)?;
        let (val_loss, val_error) = cross_entropy_of(&model, &validation)?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(TrainError::NonFinite { stage: "base", epoch });
        }
        for r in [
            record("base", epoch, "train", train_loss, train_error),
            record("base", epoch, "validation", val_loss, val_error),
        ] {
            on_record(&r);
            report.records.push(r);
        }
        report.train_error = train_error;
        report.validation_error = val_error;
    }
    Ok((rebuild(&params), report))
}

fn binder_constant<'t>(binder: &Binder<'t>, t: Tensor) -> Result<Var<'t>, TensorError> {
    binder.tape().constant(t)
}

/// Shared-bottom features `[n, F]` of every row.
fn features_of(model: &EcocEnsemble, data: &Dataset) -> Result<Tensor, TrainError> {
    let width = model.architecture().feature_len();
    let mut flat = Vec::with_capacity(data.len() * width);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(256) {
        let tape = Tape::new();
        let x = tape.constant(batch_tensor(data, chunk)?)?;
        let f = model.features(&mut Binder::frozen(&tape), x)?;
        flat.extend_from_slice(f.value().data());
    }
    Ok(Tensor::new(vec![data.len(), width], flat)?)
}

/// Target bits `[n, 1]` of one branch.
fn branch_targets(codewords: &CodewordMatrix, labels: &[usize], bit: usize) -> Vec<f64> {
    labels.iter().map(|&l| f64::from(codewords.entry(l, bit))).collect()
}

fn logistic_loss<'t>(z: Var<'t>, targets: Var<'t>) -> Result<Var<'t>, TensorError> {
    let n = z.shape()[0] as f64;
    z.mul(targets)?.scale(-1.0)?.softplus()?.reduce_sum()?.scale(1.0 / n)
}

fn branch_from(params: &[Arc<Tensor>]) -> Branch {
    Branch {
        hidden: Dense {
            weight: Arc::clone(&params[0]),
            bias: Arc::clone(&params[1]),
        },
        output: Dense {
            weight: Arc::clone(&params[2]),
            bias: Arc::clone(&params[3]),
        },
    }
}

fn branch_params(b: &Branch) -> Vec<Arc<Tensor>> {
    vec![
        Arc::clone(&b.hidden.weight),
        Arc::clone(&b.hidden.bias),
        Arc::clone(&b.output.weight),
        Arc::clone(&b.output.bias),
    ]
}

/// Bit loss and classification error of branch heads over cached features.
fn head_metrics(
    branches: &[Branch],
    codewords: &CodewordMatrix,
    features: &Tensor,
    labels: &[usize],
) -> Result<(f64, f64), TrainError> {
    let n = labels.len();
    let bits = branches.len();
    let mut logits = vec![0.0; n * bits];
    let mut loss = 0.0;
    for (i, b) in branches.iter().enumerate() {
        let tape = Tape::new();
        let f = tape.constant(features.clone())?;
        let z = b.forward(&mut Binder::frozen(&tape), f)?;
        let t = tape.constant(Tensor::new(vec![n, 1], branch_targets(codewords, labels, i))?)?;
        loss += logistic_loss(z, t)?.item();
        for (r, v) in z.value().data().iter().enumerate() {
            logits[r * bits + i] = *v;
        }
    }
    let decoder = Decoder::Ecoc(codewords);
    let mut wrong = 0;
    for (row, &l) in logits.chunks(bits).zip(labels) {
        if decoder.decode(row)?.predicted != l {
            wrong += 1;
        }
    }
    Ok((loss / bits as f64, wrong as f64 / n as f64))
}

/// Builds the ensemble from `base` (see [`EcocEnsemble::from_base`]) and fits
/// every branch to its code bit. The codeword matrix is never modified.
pub fn finetune_ensemble(
    base: &OneHotModel,
    data: &Dataset,
    codewords: &CodewordMatrix,
    config: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<(EcocEnsemble, TrainReport), TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let (train, validation) = split_train_validation(data, config)?;
    let ensemble = EcocEnsemble::from_base(base, codewords.clone())?;
    match config.bottom {
        BottomMode::Frozen => finetune_frozen(ensemble, &train, &validation, config, &mut on_record),
        BottomMode::Shared => finetune_shared(ensemble, &train, &validation, config, &mut on_record),
    }
}

/// Trains one branch on fixed features for a single epoch.
fn train_branch_epoch(
    branch: &mut Branch,
    sgd_state: &mut (ChaCha8Rng, Option<Vec<Vec<f64>>>),
    features: &Tensor,
    targets: &[f64],
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut params = branch_params(branch);
    let mut sgd = Sgd::new(config, &params);
    if let Some(v) = sgd_state.1.take() {
        sgd.velocity = v;
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.shuffle(&mut sgd_state.0);
    let mean = sgd_epoch(&mut params, &mut sgd, &order, config.batch_size, |p, binder, batch| {
        let f = binder_constant(binder, rows_of(features, batch)?)?;
        let t: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
        let t = binder_constant(binder, Tensor::new(vec![batch.len(), 1], t)?)?;
        logistic_loss(branch_from(p).forward(binder, f)?, t)
    })?;
    sgd_state.1 = Some(sgd.velocity);
    *branch = branch_from(&params);
    Ok(mean)
}

fn branch_seed(seed: u64, bit: usize) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul((bit as u64).wrapping_add(1)))
}

fn finetune_frozen(
    mut ensemble: EcocEnsemble,
    train: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
    on_record: &mut impl FnMut(&EpochRecord),
) -> Result<(EcocEnsemble, TrainReport), TrainError> {
    let codewords = ensemble.codewords().clone();
    let train_features = features_of(&ensemble, train)?;
    let val_features = features_of(&ensemble, validation)?;
    let mut branches = ensemble.branches().to_vec();
    let targets: Vec<Vec<f64>> = (0..branches.len())
        .map(|i| branch_targets(&codewords, train.labels(), i))
        .collect();
    let mut states: Vec<(ChaCha8Rng, Option<Vec<Vec<f64>>>)> = (0..branches.len())
        .map(|i| (ChaCha8Rng::seed_from_u64(branch_seed(config.seed, i)), None))
        .collect();
    let mut report = TrainReport::default();
    for epoch in 1..=config.epochs {
        let losses: Vec<f64> = branches
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .zip(targets.par_iter())
            .map(|((b, s), t)| train_branch_epoch(b, s, &train_features, t, config))
            .collect::<Result<_, _>>()?;
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(TrainError::NonFinite { stage: "finetune", epoch });
        }
        let (train_loss, train_error) = head_metrics(&branches, &codewords, &train_features, train.labels())?;
        let (val_loss, val_error) = head_metrics(&branches, &codewords, &val_features, validation.labels())?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(TrainError::NonFinite { stage: "finetune", epoch });
        }
        for r in [
            record("finetune", epoch, "train", train_loss, train_error),
            record("finetune", epoch, "validation", val_loss, val_error),
        ] {
            on_record(&r);
            report.records.push(r);
        }
        report.train_error = train_error;
        report.validation_error = val_error;
    }
    let bottom = ensemble.bottom().clone();
    ensemble.replace_parts(bottom, branches)?;
    Ok((ensemble, report))
}

fn finetune_shared(
    ensemble: EcocEnsemble,
    train: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
    on_record: &mut impl FnMut(&EpochRecord),
) -> Result<(EcocEnsemble, TrainReport), TrainError> {
    let arch = ensemble.architecture().clone();
    let codewords = ensemble.codewords().clone();
    let bits = codewords.length();
    let rebuild =
        |p: &[Arc<Tensor>]| EcocEnsemble::from_params(arch.clone(), codewords.clone(), p.to_vec()).map_err(TrainError::from);
    let mut params: Vec<Arc<Tensor>> = ensemble.named_params().into_iter().map(|(_, p)| Arc::clone(p)).collect();
    let mut sgd = Sgd::new(config, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(branch_seed(config.seed, usize::MAX));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mean = sgd_epoch(&mut params, &mut sgd, &order, config.batch_size, |p, binder, batch| {
            let model = EcocEnsemble::from_params(arch.clone(), codewords.clone(), p.to_vec())
                .map_err(|_| crate::tensor::shape_err("finetune", "parameter shapes"))?;
            let x = binder_constant(binder, batch_tensor(train, batch)?)?;
            let z = model.branchwise(binder, x)?;
            let mut t = Vec::with_capacity(batch.len() * bits);
            for &i in batch {
                t.extend(codewords.row_f64(train.label(i)));
            }
            let t = binder_constant(binder, Tensor::new(vec![batch.len(), bits], t)?)?;
            logistic_loss(z, t)?.scale(1.0 / bits as f64)
        })?;
        if !mean.is_finite() {
            return Err(TrainError::NonFinite { stage: "finetune", epoch });
        }
        let model = rebuild(&params)?;
        let tf = features_of(&model, train)?;
        let vf = features_of(&model, validation)?;
        let (train_loss, train_error) = head_metrics(model.branches(), &codewords, &tf, train.labels())?;
        let (val_loss, val_error) = head_metrics(model.branches(), &codewords, &vf, validation.labels())?;
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            return Err(TrainError::NonFinite { stage: "finetune", epoch });
        }
        for r in [
            record("finetune", epoch, "train", train_loss, train_error),
            record("finetune", epoch, "validation", val_loss, val_error),
        ] {
            on_record(&r);
            report.records.push(r);
        }
        report.train_error = train_error;
        report.validation_error = val_error;
    }
    Ok((rebuild(&params)?, report))
}
