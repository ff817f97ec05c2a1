use super::objectives::{w_from_delta, Objective};
use super::{adversarial_from_logits, outcome, perturbed, AttackConfig, AttackError, AttackKind, AttackResult, RoundTrace};
use crate::evaluation::psnr;
use crate::model::Classifier;
use crate::tensor::{Tape, Tensor};

/// What one descent iteration produced.
struct Step {
    delta: Tensor,
    logits: Vec<f64>,
    objective: f64,
    gradient: Tensor,
}

/// Optimisation variable: `δ` itself, or `w` for the tanh-space objective.
fn evaluate(objective: &Objective<'_>, variable: &Tensor) -> Result<Step, AttackError> {
    let tape = Tape::new();
    let v = tape.var(variable.clone())?;
    let (obj, z, delta) = if objective.kind() == AttackKind::CwOneHot {
        let (obj, z, d) = objective.record_w(&tape, v)?;
        (obj, z, (*d.value()).clone())
    } else {
        let (obj, z) = objective.record(&tape, v)?;
        (obj, z, variable.clone())
    };
    let value = obj.item();
    let gradient = if value.is_finite() {
        tape.gradients(obj)?.wrt(v)
    } else {
        Tensor::zeros(variable.shape().to_vec())
    };
    Ok(Step {
        delta,
        logits: z.value().data().to_vec(),
        objective: value,
        gradient,
    })
}

/// Keeps `x + δ` inside `[0, 1]`.
fn clip_into_box(delta: &mut Tensor, x: &Tensor) {
    for (d, &p) in delta.data_mut().iter_mut().zip(x.data()) {
        *d = (p + *d).clamp(0.0, 1.0) - p;
    }
}

/// Binary search over `λ` around normalised gradient descent.
///
/// Every round restarts from `δ = 0` and runs `m` iterations. Before each
/// step the current `x + δ` is checked; when it is adversarial and smaller
/// than the best perturbation so far it becomes the new best and the round
/// counts as found. A found round lowers the upper bound to `λ`, otherwise
/// the lower bound rises to `λ`. `λ` grows tenfold while no upper bound
/// exists and is bisected afterwards.
///
/// A non-finite objective ends the round as not found. A zero gradient skips
/// the step but still uses up the iteration.
pub fn binary_search_attack(
    model: &dyn Classifier,
    x: &Tensor,
    target: usize,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    let mut objective = Objective::new(model, x, target, config.kind, config.lambda_start, config.confidence)?;
    let decoder = model.decoder();
    let xb = objective.x().clone();
    let zero = Tensor::zeros(xb.shape().to_vec());
    let start = if config.kind == AttackKind::CwOneHot {
        w_from_delta(&zero, &xb)
    } else {
        zero
    };

    let (mut upper, mut lower) = (f64::INFINITY, 0.0);
    let mut lambda = config.lambda_start;
    let mut best: Option<Tensor> = None;
    let mut best_norm = f64::INFINITY;
    let mut last = start.clone();
    let mut rounds = Vec::with_capacity(config.binary_search_steps);
    let mut iterations = 0;

    for _ in 0..config.binary_search_steps {
        objective.set_lambda(lambda);
        let mut variable = start.clone();
        let mut found = false;
        let mut used = 0;
        for _ in 0..config.max_iterations {
            used += 1;
            let step = evaluate(&objective, &variable)?;
            let norm = step.delta.l2_norm();
            if norm < best_norm && adversarial_from_logits(config.kind, &decoder, &step.logits, target, config.confidence)? {
                best = Some(step.delta.clone());
                best_norm = norm;
                found = true;
            }
            last = step.delta;
            if !step.objective.is_finite() {
                found = false;
                break;
            }
            let g = step.gradient.l2_norm();
            if g > 0.0 && g.is_finite() {
                variable.axpy(-config.step_size / g, &step.gradient);
                if config.kind != AttackKind::CwOneHot {
                    clip_into_box(&mut variable, &xb);
                }
            }
        }
        iterations += used;
        if found {
            upper = lambda;
        } else {
            lower = lambda;
        }
        rounds.push(RoundTrace {
            lambda,
            found,
            upper,
            lower,
            iterations: used,
        });
        lambda = if upper.is_infinite() { 10.0 * lambda } else { (upper + lower) / 2.0 };
    }

    let success = best.is_some();
    let mut delta = best.unwrap_or(last);
    // `x + ½(tanh w + 1) − x` can round a hair outside the box.
    clip_into_box(&mut delta, &xb);
    let delta = delta.reshape(x.shape().to_vec())?;
    let x_adv = perturbed(x, &delta);
    let o = outcome(model, x, &x_adv, target)?;
    let codeword = decoder.codewords().map(|c| c.row(target).to_vec());
    let l2_norm = delta.l2_norm();
    Ok(AttackResult {
        kind: config.kind,
        target,
        codeword,
        original_class: o.original_class,
        psnr_db: psnr(&delta, delta.len())?,
        delta,
        success,
        l2_norm,
        iterations,
        final_lambda: rounds.last().map(|r| r.lambda),
        rounds,
        prob_true_before: o.prob_true_before,
        prob_true_after: o.prob_true_after,
        prob_target_before: o.prob_target_before,
        prob_target_after: o.prob_target_after,
        target_logits: None,
        converged: false,
    })
}
