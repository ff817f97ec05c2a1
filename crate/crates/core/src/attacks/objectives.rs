use std::sync::Arc;

use super::{check_target, AttackError, AttackKind};
use crate::model::{Classifier, Decoder};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Shrink applied before `atanh` so pixels at exactly 0 or 1 stay finite.
const TANH_SHRINK: f64 = 1.0 - 1e-6;

/// `δ = ½(tanh w + 1) − x`.
pub fn delta_from_w(w: &Tensor, x: &Tensor) -> Tensor {
    let mut out = w.map(|v| 0.5 * (v.tanh() + 1.0));
    out.axpy(-1.0, x);
    out
}

/// Inverse of [`delta_from_w`] up to the boundary shrink.
pub fn w_from_delta(delta: &Tensor, x: &Tensor) -> Tensor {
    let mut p = x.clone();
    p.axpy(1.0, delta);
    p.map(|v| ((2.0 * v.clamp(0.0, 1.0) - 1.0) * TANH_SHRINK).atanh())
}

/// One of the three Lagrangian objectives bound to an input, target and `λ`.
pub struct Objective<'m> {
    kind: AttackKind,
    model: &'m dyn Classifier,
    x: Arc<Tensor>,
    target: usize,
    lambda: f64,
    confidence: f64,
    /// Indices of every class but the target.
    others: Vec<usize>,
    /// Proposed: the target codeword `[1, N]`.
    target_bits: Option<Arc<Tensor>>,
    /// C&W-ECOC: `Cᵀ` as `[N, M]`.
    codes_t: Option<Arc<Tensor>>,
}

impl<'m> Objective<'m> {
    pub fn new(
        model: &'m dyn Classifier,
        x: &Tensor,
        target: usize,
        kind: AttackKind,
        lambda: f64,
        confidence: f64,
    ) -> Result<Self, AttackError> {
        if kind == AttackKind::Lots {
            return Err(AttackError::Config("LOTS has no Lagrangian objective".into()));
        }
        let decoder = model.decoder();
        kind.check_compatible(&decoder)?;
        check_target(&decoder, target)?;
        let shape = model.batch_shape(x)?;
        if shape[0] != 1 {
            return Err(AttackError::Config("attacks take a single image".into()));
        }
        let (target_bits, codes_t) = match (&decoder, kind) {
            (Decoder::Ecoc(c), AttackKind::Proposed) => {
                (Some(Arc::new(Tensor::new(vec![1, c.length()], c.row_f64(target))?)), None)
            }
            (Decoder::Ecoc(c), AttackKind::CwEcoc) => {
                (None, Some(Arc::new(Tensor::new(vec![c.length(), c.classes()], c.transposed_f64())?)))
            }
            _ => (None, None),
        };
        Ok(Self {
            kind,
            model,
            x: Arc::new(x.clone().reshape(shape)?),
            target,
            lambda,
            confidence,
            others: (0..decoder.classes()).filter(|&k| k != target).collect(),
            target_bits,
            codes_t,
        })
    }

    pub fn kind(&self) -> AttackKind {
        self.kind
    }

    /// Clean input with its batch axis, `[1, ..]`.
    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
    }

    fn gap<'t>(&self, scores: Var<'t>) -> Result<Var<'t>, TensorError> {
        let other = scores.gather(&self.others)?.reduce_max()?;
        let own = scores.gather(&[self.target])?.reshape(Vec::new())?;
        other.sub(own)
    }

    /// Records the objective as a function of `delta` (`[1, ..]`). Returns
    /// the objective and the logits.
    pub fn record<'t>(&self, tape: &'t Tape, delta: Var<'t>) -> Result<(Var<'t>, Var<'t>), AttackError> {
        let x = tape.constant(Arc::clone(&self.x))?;
        let z = self.model.logits_on(tape, x.add(delta)?)?;
        let term = match self.kind {
            AttackKind::Proposed => {
                let t = tape.constant(Arc::clone(self.target_bits.as_ref().expect("proposed codeword")))?;
                z.mul(t)?
                    .scale(2.0)?
                    .reduce_min()?
                    .min_scalar(self.confidence)?
                    .scale(-self.lambda)?
            }
            AttackKind::CwOneHot => self.gap(z)?.max_scalar(self.confidence)?.scale(self.lambda)?,
            AttackKind::CwEcoc => {
                let ct = tape.constant(Arc::clone(self.codes_t.as_ref().expect("codeword matrix")))?;
                let rho = z.tanh()?.matmul(ct)?;
                self.gap(rho)?.max_scalar(self.confidence)?.scale(self.lambda)?
            }
            AttackKind::Lots => unreachable!("rejected in new"),
        };
        Ok((delta.l2_norm()?.add(term)?, z))
    }

    /// Records the objective as a function of `w`, with
    /// `δ = ½(tanh w + 1) − x`. Returns the objective, logits and `δ`.
    pub fn record_w<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>), AttackError> {
        let x = tape.constant(Arc::clone(&self.x))?;
        let delta = w.tanh()?.add_scalar(1.0)?.scale(0.5)?.sub(x)?;
        let (obj, z) = self.record(tape, delta)?;
        Ok((obj, z, delta))
    }

    /// Objective value at `delta`.
    pub fn value(&self, delta: &Tensor) -> Result<f64, AttackError> {
        let tape = Tape::new();
        let d = tape.constant(delta.clone().reshape(self.x.shape().to_vec())?)?;
        Ok(self.record(&tape, d)?.0.item())
    }
}

/// `‖δ‖ + λ·max(max_{i≠t} z_i − z_t, c)` at `x + δ`.
pub fn cw_onehot_objective(
    model: &dyn Classifier,
    x: &Tensor,
    delta: &Tensor,
    target: usize,
    lambda: f64,
    confidence: f64,
) -> Result<f64, AttackError> {
    Objective::new(model, x, target, AttackKind::CwOneHot, lambda, confidence)?.value(delta)
}

/// `‖δ‖ + λ·max(max_{i≠t} ρ_i − ρ_t, c)` with `ρ = tanh(z) · Cᵀ` at `x + δ`.
pub fn cw_ecoc_objective(
    model: &dyn Classifier,
    x: &Tensor,
    delta: &Tensor,
    target: usize,
    lambda: f64,
    confidence: f64,
) -> Result<f64, AttackError> {
    Objective::new(model, x, target, AttackKind::CwEcoc, lambda, confidence)?.value(delta)
}

/// `‖δ‖ − λ·min(min_i 2 t_i z_i, c)` with `t = C_target` at `x + δ`.
pub fn proposed_objective(
    model: &dyn Classifier,
    x: &Tensor,
    delta: &Tensor,
    target: usize,
    lambda: f64,
    confidence: f64,
) -> Result<f64, AttackError> {
    Objective::new(model, x, target, AttackKind::Proposed, lambda, confidence)?.value(delta)
}
