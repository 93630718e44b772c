use alloc::string::String;
use alloc::vec::Vec;

use super::param::ParameterSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Absolute floor of the relative-error denominator, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(params: &ParameterSet, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let root = f(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

/// Checks `f`'s analytic gradient against central differences of step
/// `eps` over every entry of `params`.
///
/// `f` receives the tape and the leaf handle of each parameter, in order.
pub fn check_gradients<F>(params: &ParameterSet, eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("gradient check step must be positive"));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?.clone();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
        tolerance: tol,
    };
    let mut probe = params.clone();
    for (pi, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(t) => t.data().to_vec(),
            None => alloc::vec![0.0; params.get(pi).len()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params.get(pi).tensor().data()[j];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(pi).values_mut()[j] = x;
                let v = evaluate(&probe, &f);
                probe.get_mut(pi).values_mut()[j] = orig;
                match v {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::Numeric(alloc::format!(
                        "non-finite loss with `{}`[{j}] perturbed to {x}",
                        params.get(pi).name()
                    ))),
                }
            };
            let plus = at(orig + eps)?;
            let minus = at(orig - eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = params.get(pi).name().into();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
