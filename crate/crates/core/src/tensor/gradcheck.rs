//! Central-difference gradient checking.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every checked component.
    pub max_rel_error: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    /// `(input, component)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor], recording: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = if recording { Tape::new() } else { Tape::inference() };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

/// Checks the gradient of scalar `f` with respect to every input.
///
/// `f` is re-run for each perturbation, so anything random inside it must be
/// replayed from a cloned generator to keep the function fixed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(tape);

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_input: vec![0.0; inputs.len()],
        worst: (0, 0),
        checked: 0,
    };
    for (ti, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let base = input.data()[k];
            probe[ti].data_mut()[k] = base + eps;
            let plus = value_at(&f, &probe)?;
            probe[ti].data_mut()[k] = base - eps;
            let minus = value_at(&f, &probe)?;
            probe[ti].data_mut()[k] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[ti][k], numeric);
            report.checked += 1;
            if err > report.per_input[ti] {
                report.per_input[ti] = err;
            }
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (ti, k);
            }
        }
    }
    Ok(report)
}

fn value_at<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs, false)?;
    tape.scalar(out)
}

/// Single-input form returning the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}
