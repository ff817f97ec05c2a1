use std::collections::VecDeque;

use super::{check_target, outcome, perturbed, AttackConfig, AttackError, AttackKind, AttackResult};
use crate::evaluation::psnr;
use crate::model::Classifier;
use crate::tensor::{Tape, Tensor};

/// Losses averaged by the convergence rule.
const WINDOW: usize = 10;
const RELATIVE_TOLERANCE: f64 = 1e-4;

/// Elementwise mean of the pool's logits.
pub fn lots_target(model: &dyn Classifier, pool: &[Tensor]) -> Result<Vec<f64>, AttackError> {
    if pool.is_empty() {
        return Err(AttackError::EmptyPool);
    }
    let mut mean = vec![0.0; model.decoder().logit_len()];
    for image in pool {
        let z = model.logits(image)?;
        for (m, v) in mean.iter_mut().zip(z.data()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= pool.len() as f64;
    }
    Ok(mean)
}

/// Gradient descent on `½‖z(x + δ) − z_target‖²` with step `ε`, clipped to
/// the pixel box, for at most `m` steps.
///
/// Stops early when the loss is zero or within a relative `1e-4` of the mean
/// of the previous ten losses. Success means the final image is classified
/// as `target`. Only `step_size` and `max_iterations` of `config` are used.
pub fn lots_attack(
    model: &dyn Classifier,
    x: &Tensor,
    target: usize,
    pool: &[Tensor],
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    let decoder = model.decoder();
    check_target(&decoder, target)?;
    let target_logits = lots_target(model, pool)?;
    let shape = model.batch_shape(x)?;
    let xb = x.clone().reshape(shape.clone())?;
    let goal = Tensor::new(vec![1, target_logits.len()], target_logits.clone())?;
    let mut delta = Tensor::zeros(shape);
    let mut history: VecDeque<f64> = VecDeque::with_capacity(WINDOW);
    let mut steps = 0;
    let mut converged = false;

    while steps < config.max_iterations {
        let tape = Tape::new();
        let d = tape.var(delta.clone())?;
        let z = model.logits_on(&tape, tape.constant(xb.clone())?.add(d)?)?;
        let diff = z.sub(tape.constant(goal.clone())?)?;
        let loss = diff.inner_product(diff)?.scale(0.5)?;
        let value = loss.item();
        if !value.is_finite() {
            break;
        }
        if value == 0.0 {
            converged = true;
            break;
        }
        if history.len() == WINDOW {
            let mean = history.iter().sum::<f64>() / WINDOW as f64;
            if (value - mean).abs() <= RELATIVE_TOLERANCE * mean.abs() {
                converged = true;
                break;
            }
            history.pop_front();
        }
        history.push_back(value);
        let g = tape.gradients(loss)?.wrt(d);
        delta.axpy(-config.step_size, &g);
        for (v, &p) in delta.data_mut().iter_mut().zip(xb.data()) {
            *v = (p + *v).clamp(0.0, 1.0) - p;
        }
        steps += 1;
    }

    let delta = delta.reshape(x.shape().to_vec())?;
    let x_adv = perturbed(x, &delta);
    let success = model.predict(&x_adv)? == target;
    let o = outcome(model, x, &x_adv, target)?;
    let l2_norm = delta.l2_norm();
    Ok(AttackResult {
        kind: AttackKind::Lots,
        target,
        codeword: decoder.codewords().map(|c| c.row(target).to_vec()),
        original_class: o.original_class,
        psnr_db: psnr(&delta, delta.len())?,
        delta,
        success,
        l2_norm,
        iterations: steps,
        final_lambda: None,
        rounds: Vec::new(),
        prob_true_before: o.prob_true_before,
        prob_true_after: o.prob_true_after,
        prob_target_before: o.prob_target_before,
        prob_target_after: o.prob_target_after,
        target_logits: Some(target_logits),
        converged,
    })
}
