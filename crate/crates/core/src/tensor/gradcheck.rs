//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};

/// Denominator floor for the relative error, so that gradients which are
/// zero on both sides compare as equal instead of 0/0.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Element with the largest relative error.
    pub worst_element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
    pub passed: bool,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Compares backprop gradients of the scalar `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every element of every input.
///
/// `f` must be deterministic. Failures are reported, never raised.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars);
    let loss = tape.value(out).item();
    tape.backward(out);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut report = InputReport {
            input: k,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_element: 0,
        };
        for e in 0..grad.len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let plus = evaluate(&f, &work);
            work[k].data_mut()[e] = orig - h;
            let minus = evaluate(&f, &work);
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(grad[e], numeric);
            report.max_abs_error = report.max_abs_error.max((grad[e] - numeric).abs());
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_element = e;
            }
        }
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.max_rel_error <= tol);
    GradCheckReport {
        inputs: reports,
        tol,
        passed,
        loss,
    }
}
