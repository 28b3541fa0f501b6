//! Finite-difference gradient checking.

use super::array::Array;
use super::tape::{Tape, Var};
use crate::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Check the tape gradients of a scalar-valued function against central
/// differences and return the worst relative error over all parameter
/// elements.
///
/// `f` receives a fresh tape and one parameter [`Var`] per entry of `params`;
/// it must return a one-element node and be deterministic. Relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &[Array], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |arrays: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.param(a.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Shape(format!(
                "grad_check target must be scalar, got {:?}",
                tape.value(out).shape()
            )));
        }
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("grad_check loss is {v}")));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|a| tape.param(a.clone())).collect();
    let out = f(&mut tape, &vars)?;
    eval(params)?; // validates scalar shape and finiteness
    tape.backward(out)?;
    let analytic: Vec<Array> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut worst = 0.0_f64;
    let mut perturbed: Vec<Array> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.numel() {
            let base = param.data()[ei];
            perturbed[pi].data_mut()[ei] = base + h;
            let up = eval(&perturbed)?;
            perturbed[pi].data_mut()[ei] = base - h;
            let down = eval(&perturbed)?;
            perturbed[pi].data_mut()[ei] = base;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
