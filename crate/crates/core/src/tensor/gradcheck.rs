use super::{Tape, TapeOptions, Tensor, TensorError, Var};

/// Elementwise `|a - b| / max(1e-12, |a| + |b|)`, maximised over elements.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

fn evaluate<F>(f: &F, options: TapeOptions, x: &Tensor) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::with_options(options);
    let v = tape.constant(x.clone())?;
    Ok(f(&tape, v)?.item())
}

/// Central-difference gradient of a scalar function built on a tape.
pub fn numerical_gradient<F>(f: &F, x: &Tensor, step: f64) -> Result<Tensor, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let options = TapeOptions::default();
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = evaluate(f, options, &probe)?;
        probe.data_mut()[i] = orig - step;
        let down = evaluate(f, options, &probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Compares the tape gradient of `f` at `x` against central differences with
/// step `step` and returns the largest relative error.
///
/// `options` applies to the analytic pass only, so an injected fault shows up
/// as a mismatch.
pub fn finite_difference_check<F>(
    f: &F,
    x: &Tensor,
    step: f64,
    options: TapeOptions,
) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(super::shape_err("finite_difference_check", "step must be positive"));
    }
    let tape = Tape::with_options(options);
    let v = tape.var(x.clone())?;
    let out = f(&tape, v)?;
    if !out.item().is_finite() {
        return Err(TensorError::NonFinite("finite_difference_check"));
    }
    let analytic = tape.gradients(out)?.wrt(v);
    let numeric = numerical_gradient(f, x, step)?;
    Ok(relative_error(analytic.data(), numeric.data()))
}
