use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor: central differences at `eps = 1e-5` carry about
/// `1e-10` of rounding noise, so coordinates whose true gradient is zero
/// (e.g. attention key biases) would otherwise dominate.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// Largest `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

/// Gradient of `f` at `point` from one reverse sweep.
pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(&point.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    if !tape.scalar(y).is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    tape.backward(y)?;
    Ok(tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]))
}

/// Central finite differences of `f` at `point`.
pub fn numeric_gradient<F>(f: &F, point: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let y = f(&mut tape, x)?;
        let v = tape.scalar(y);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares reverse-mode and central-difference gradients of a scalar
/// function, returning the max relative error.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}
