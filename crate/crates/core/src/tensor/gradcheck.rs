//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used to build the numerical gradient, so the
//! check stays independent of every backward rule it verifies.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_errors: Vec<f64>,
    /// Per input: `‖analytic − numeric‖₂`.
    pub abs_errors: Vec<f64>,
    /// Per input: `max(‖analytic‖₂, ‖numeric‖₂)`.
    pub scales: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }

    /// Relative error of all inputs taken as one flat vector.
    pub fn global_rel_error(&self) -> f64 {
        let diff = self.abs_errors.iter().map(|e| e * e).sum::<f64>().sqrt();
        let scale = self.scales.iter().map(|e| e * e).sum::<f64>().sqrt();
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::dim("gradient check needs a scalar output"));
    }
    Ok((tape, vars, out))
}

/// Compares backward gradients of the scalar `f(inputs)` against central
/// differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = eval(&f, inputs)?;
    let grads = tape.backward(out)?;
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut abs_errors = Vec::with_capacity(inputs.len());
    let mut scales = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let mut shifted: Vec<Tensor> = inputs.to_vec();
            shifted[k].data_mut()[i] = input.data()[i] + h;
            let plus = eval(&f, &shifted)?;
            let fp = plus.0.value(plus.2).item();
            shifted[k].data_mut()[i] = input.data()[i] - h;
            let minus = eval(&f, &shifted)?;
            let fm = minus.0.value(minus.2).item();
            *num = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        rel_errors.push(if denom < 1e-12 { diff } else { diff / denom });
        abs_errors.push(diff);
        scales.push(denom);
    }
    Ok(GradCheck {
        rel_errors,
        abs_errors,
        scales,
    })
}
