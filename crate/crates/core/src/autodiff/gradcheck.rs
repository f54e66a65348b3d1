use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let y = f(&mut tape, xv)?;
    tape.value(y)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(tape.shape(y).to_vec()))
}

/// Central finite differences of a scalar function, one element at a time.
pub fn numeric_gradient<F>(f: &F, x: &Tensor<f64>, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(f, &probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest elementwise [`relative_error`] between the tape gradient of `f` at
/// `x` and central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
