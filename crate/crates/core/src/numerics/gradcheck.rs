use crate::error::Result;

use super::{ParamId, ParamStore, Tape, Var};

/// Denominator floor in the relative error, so that gradients which are
/// both near zero compare by absolute difference.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the tape gradient of `f` at `x` with central differences of step `h`.
pub fn finite_difference_check(
    x: &[f64],
    h: f64,
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let input = super::Tensor::new(vec![x.len()], x.to_vec())?;
    let mut tape = Tape::new();
    let v = tape.leaf(input.clone(), true);
    let loss = f(&mut tape, v)?;
    tape.backward_inputs(loss)?;
    let analytic = tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(super::Tensor::new(vec![values.len()], values)?, false);
        let loss = f(&mut tape, v)?;
        Ok(tape.value(loss).item())
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some(("x".into(), i));
        }
    }
    Ok(report)
}

/// Central-difference check of every element of the selected parameters,
/// where `loss` builds a scalar loss from the store on a fresh tape.
pub fn check_parameters(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    h: f64,
    loss: impl Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(store, &mut tape)?;
    tape.backward(out, store)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(store, &mut tape)?;
        Ok(tape.value(out).item())
    };
    for &id in params {
        let analytic = match &store.get(id).grad {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; store.get(id).value.len()],
        };
        for (i, &a) in analytic.iter().enumerate() {
            let original = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = original + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original;
            let err = relative_error(a, (up - down) / (2.0 * h));
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
