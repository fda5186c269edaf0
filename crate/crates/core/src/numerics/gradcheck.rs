use super::{Fault, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    /// `(param index, flat coordinate)` where the max was observed.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the tape's gradient of a scalar function against central
/// differences, perturbing every coordinate of every parameter.
///
/// `f` receives a fresh tape and the parameter leaves and must return a
/// one-element output. It is re-run twice per coordinate, so it has to be
/// deterministic.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(f, params, eps, None)
}

/// [`grad_check`] with `fault` injected into the analytic backward pass only.
pub fn grad_check_with_fault<T, F>(f: F, params: &[Tensor<T>], eps: T, fault: Option<Fault>) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eps64 = eps.to_f64_lossy();
    if !(1e-7..=1e-3).contains(&eps64) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps must lie in [1e-7, 1e-3], got {eps64}"),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if !p.all_finite() {
            return Err(Error::NonFinite(format!("parameter {i} holds a non-finite value")));
        }
    }

    let eval = |values: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::with_fault(fault);
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite("function value at the unperturbed point".into()));
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of parameter {pi}")));
        }
        for c in 0..params[pi].numel() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "function value while perturbing parameter {pi}, coordinate {c}"
                )));
            }
            let numeric = (plus.to_f64_lossy() - minus.to_f64_lossy()) / (2.0 * eps64);
            let a = analytic.data()[c].to_f64_lossy();
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
