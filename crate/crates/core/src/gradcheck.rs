//! Central finite-difference verification of taped gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of checking a function against finite differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Worst `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Worst error per input, in input order.
    pub per_input: Vec<f64>,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Relative error used throughout the gradient checks.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Usage(format!("gradcheck needs a scalar function, got shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Checks every input of a multi-input scalar function.
///
/// With `max_entries = Some(n)`, at most `n` evenly spaced entries of each
/// input are perturbed; `None` checks all of them.
pub fn gradcheck_inputs<F>(f: F, inputs: &[Tensor], h: f64, max_entries: Option<usize>) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = match max_entries {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in picks {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval_scalar(&f, &work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval_scalar(&f, &work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_error(analytic[k].data()[i], numeric));
            checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradcheckReport {
        max_rel_error: per_input.iter().cloned().fold(0.0, f64::max),
        per_input,
        checked,
    })
}

/// Single-input form: maximum relative error over all entries of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_inputs(|t, v| f(t, v[0]), std::slice::from_ref(x), h, None).map(|r| r.max_rel_error)
}
