use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Absolute floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of a scalar function with central differences
/// `(f(x+eps) - f(x-eps)) / 2eps` and returns the largest relative error
/// `|auto - numeric| / max(|auto|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh tape and the input handle, and must return a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let base = tape.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f(x) = {base}")));
    }
    let grads = tape.backward(out)?;
    let auto = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.param(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut tape, xv)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check: perturbed f = {v}")));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = auto.data()[i];
        let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
