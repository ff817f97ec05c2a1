//! Targeted white-box attacks.
//!
//! Three objectives share the binary search over `λ` in [`binary_search_attack`]:
//!
//! * proposed: `‖δ‖ − λ·min(min_i 2 t_i z_i, c)` on the ensemble's logits,
//! * C&W-ECOC: `‖δ‖ + λ·max(max_{i≠t} ρ_i − ρ_t, c)` on correlations,
//! * C&W one-hot: `‖δ‖ + λ·max(max_{i≠t} z_i − z_t, c)` optimised over `w`
//!   with `δ = ½(tanh w + 1) − x`.
//!
//! [`lots_attack`] instead pulls the logits towards a target representation.

mod binary_search;
mod campaign;
mod lots;
mod objectives;

pub use binary_search::binary_search_attack;
pub use campaign::{choose_target, run_campaign, CampaignItem, CampaignSpec};
pub use lots::{lots_attack, lots_target};
pub use objectives::{cw_ecoc_objective, cw_onehot_objective, delta_from_w, proposed_objective, w_from_delta, Objective};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Classifier, Decoder, ModelError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("{kind} attack cannot target {model} models")]
    Incompatible { kind: AttackKind, model: &'static str },
    #[error("target class {target} outside 0..{classes}")]
    Target { target: usize, classes: usize },
    #[error("LOTS needs a non-empty pool of target-class images")]
    EmptyPool,
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Proposed,
    CwEcoc,
    #[serde(rename = "cw-onehot")]
    CwOneHot,
    Lots,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [AttackKind::Proposed, AttackKind::CwEcoc, AttackKind::CwOneHot, AttackKind::Lots];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Proposed => "proposed",
            AttackKind::CwEcoc => "cw-ecoc",
            AttackKind::CwOneHot => "cw-onehot",
            AttackKind::Lots => "lots",
        }
    }

    /// Refuses kinds whose objective does not exist for the model's decoder.
    pub fn check_compatible(self, decoder: &Decoder<'_>) -> Result<(), AttackError> {
        let ecoc = decoder.codewords().is_some_and(|c| !c.is_one_hot());
        let ok = match self {
            AttackKind::Proposed | AttackKind::CwEcoc => ecoc,
            AttackKind::CwOneHot => matches!(decoder, Decoder::Softmax { .. }),
            AttackKind::Lots => true,
        };
        if ok {
            Ok(())
        } else {
            Err(AttackError::Incompatible {
                kind: self,
                model: if ecoc { "ecoc" } else { "one-hot" },
            })
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AttackError::Config(format!("unknown attack kind {s:?}")))
    }
}

/// `(λ₁, n, m, c)` plus the step size and the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub lambda_start: f64,
    pub binary_search_steps: usize,
    pub step_size: f64,
    pub max_iterations: usize,
    pub confidence: f64,
}

impl AttackConfig {
    pub const DEFAULT_STEP_SIZE: f64 = 0.01;

    pub fn new(kind: AttackKind, lambda_start: f64, binary_search_steps: usize, max_iterations: usize, confidence: f64) -> Self {
        Self {
            kind,
            lambda_start,
            binary_search_steps,
            step_size: Self::DEFAULT_STEP_SIZE,
            max_iterations,
            confidence,
        }
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if !(self.lambda_start > 0.0 && self.lambda_start.is_finite()) {
            return bad("lambda_start must be positive");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be positive");
        }
        if self.binary_search_steps == 0 {
            return bad("binary search needs at least one step");
        }
        if self.max_iterations == 0 {
            return bad("max iterations must be at least 1");
        }
        if !self.confidence.is_finite() {
            return bad("confidence must be finite");
        }
        Ok(())
    }

    /// `λ₁,n,m,c`, the order used to name table rows.
    pub fn params_string(&self) -> String {
        format!(
            "{},{},{},{}",
            self.lambda_start, self.binary_search_steps, self.max_iterations, self.confidence
        )
    }
}

/// Parses `λ₁,n,m,c`.
pub fn parse_params(s: &str) -> Result<(f64, usize, usize, f64), AttackError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || AttackError::Config(format!("expected lambda,n,m,c, got {s:?}"));
    if parts.len() != 4 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
        parts[3].parse().map_err(|_| bad())?,
    ))
}

/// State after one binary-search round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub lambda: f64,
    pub found: bool,
    pub upper: f64,
    pub lower: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub target: usize,
    /// Target codeword for ECOC models.
    pub codeword: Option<Vec<i8>>,
    /// Class predicted on the clean input.
    pub original_class: usize,
    pub delta: Tensor,
    pub success: bool,
    pub l2_norm: f64,
    pub psnr_db: f64,
    pub iterations: usize,
    /// `λ` of the last round, or `None` for LOTS.
    pub final_lambda: Option<f64>,
    pub rounds: Vec<RoundTrace>,
    pub prob_true_before: f64,
    pub prob_true_after: f64,
    pub prob_target_before: f64,
    pub prob_target_after: f64,
    /// LOTS target logits.
    pub target_logits: Option<Vec<f64>>,
    /// LOTS stopped on its convergence rule.
    pub converged: bool,
}

/// The attacked score margin for `kind` at logits `z`.
///
/// * proposed: `min_i 2 t_i z_i`
/// * C&W one-hot: `z_t − max_{i≠t} z_i`
/// * C&W-ECOC: `ρ_t − max_{i≠t} ρ_i`
/// * LOTS: `+∞` (only the prediction matters).
pub fn attack_margin(kind: AttackKind, decoder: &Decoder<'_>, logits: &[f64], target: usize) -> Result<f64, AttackError> {
    let gap = |v: &[f64]| {
        let other = v
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        v[target] - other
    };
    match kind {
        AttackKind::Proposed => {
            let codes = decoder.codewords().ok_or(AttackError::Incompatible {
                kind,
                model: "one-hot",
            })?;
            Ok(logits
                .iter()
                .zip(codes.row(target))
                .map(|(&z, &t)| 2.0 * f64::from(t) * z)
                .fold(f64::INFINITY, f64::min))
        }
        AttackKind::CwOneHot => Ok(gap(logits)),
        AttackKind::CwEcoc => {
            let codes = decoder.codewords().ok_or(AttackError::Incompatible {
                kind,
                model: "one-hot",
            })?;
            Ok(gap(&crate::model::correlations(logits, codes)?))
        }
        AttackKind::Lots => Ok(f64::INFINITY),
    }
}

/// Prediction is `target` and the kind's margin reaches `c` (inclusive).
pub fn is_adversarial(
    model: &dyn Classifier,
    x_adv: &Tensor,
    target: usize,
    confidence: f64,
    kind: AttackKind,
) -> Result<bool, AttackError> {
    let z = model.logits(x_adv)?;
    adversarial_from_logits(kind, &model.decoder(), z.data(), target, confidence)
}

pub(crate) fn adversarial_from_logits(
    kind: AttackKind,
    decoder: &Decoder<'_>,
    logits: &[f64],
    target: usize,
    confidence: f64,
) -> Result<bool, AttackError> {
    if decoder.decode(logits)?.predicted != target {
        return Ok(false);
    }
    Ok(attack_margin(kind, decoder, logits, target)? >= confidence)
}

pub(crate) fn check_target(decoder: &Decoder<'_>, target: usize) -> Result<(), AttackError> {
    if target >= decoder.classes() {
        return Err(AttackError::Target {
            target,
            classes: decoder.classes(),
        });
    }
    Ok(())
}

/// Clean and adversarial probabilities plus bookkeeping shared by all kinds.
pub(crate) struct Outcome {
    pub original_class: usize,
    pub prob_true_before: f64,
    pub prob_target_before: f64,
    pub prob_true_after: f64,
    pub prob_target_after: f64,
}

pub(crate) fn outcome(model: &dyn Classifier, x: &Tensor, x_adv: &Tensor, target: usize) -> Result<Outcome, AttackError> {
    let before = model.scores(x)?;
    let after = model.scores(x_adv)?;
    let original_class = before.predicted;
    Ok(Outcome {
        original_class,
        prob_true_before: before.probabilities[original_class],
        prob_target_before: before.probabilities[target],
        prob_true_after: after.probabilities[original_class],
        prob_target_after: after.probabilities[target],
    })
}

/// `x + δ`.
pub(crate) fn perturbed(x: &Tensor, delta: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.axpy(1.0, delta);
    out
}
