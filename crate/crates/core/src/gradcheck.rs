//! Central-difference gradient verification against the tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and central differences.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once; the error is the max over all of them.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Domain(format!("grad_check step must be > 0, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    check_finite(&tape)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    for g in &analytic {
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "backward".into() });
        }
    }

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        check_finite(&tape)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[which].data()[i], numeric));
        }
    }
    Ok(worst)
}

fn check_finite(tape: &Tape) -> Result<()> {
    match tape.first_non_finite() {
        Some((_, op)) => Err(Error::NonFinite { op: op.to_string() }),
        None => Ok(()),
    }
}
