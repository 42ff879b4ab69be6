use alloc::format;
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape
        .value(root)?
        .item()
        .ok_or_else(|| Error::NonScalarRoot(tape.value(root).map(|t| t.shape().to_vec()).unwrap_or_default()))?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("grad_check function value {value}")));
    }
    Ok(value)
}

/// Compares tape gradients of a scalar function against central finite
/// differences on every parameter entry.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root)?.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    let grads = tape.backward(root)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig - step;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
