//! Finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative error between the tape gradient of scalar `f` at `x`
/// and a central difference with step `eps`.
///
/// Relative error per component is `|analytic − numeric| / max(1, |numeric|)`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`gradient_check`] over several inputs at once; the maximum is taken over
/// every component of every input.
pub fn gradient_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract("gradient_check needs a scalar function".into()));
    }
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; xs[slot].len()]);
        for (i, &an) in analytic.iter().enumerate() {
            let orig = xs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[slot].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (an - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
