//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::nncore::{Bound, ParamSet, Tape, Var};

/// Denominator floor of the relative error, so gradients that are both
/// essentially zero compare by absolute difference.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares analytic gradients of `loss` against central differences with
/// step `h` for every parameter element.
pub fn gradient_check<F>(params: &ParamSet<f64>, h: f64, tolerance: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind_all(&mut tape);
    let out = loss(&mut tape, &bound)?;
    let grads = tape.backward(out)?;

    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind_all(&mut tape);
        let out = loss(&mut tape, &bound)?;
        Ok(tape.scalar(out))
    };

    let mut probe = params.clone();
    let mut checks = Vec::with_capacity(params.len());
    for (id, name, value) in params.iter() {
        let analytic = grads.get(bound.var(id));
        let mut check = ParamCheck {
            name: name.to_string(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for j in 0..value.len() {
            let orig = value.data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[j]);
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = j;
            }
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        tolerance,
    })
}
