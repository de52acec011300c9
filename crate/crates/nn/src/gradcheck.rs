//! Central finite-difference gradient checking.
//!
//! The numeric side only reads loss values, so it is independent of the
//! backward rules for the parameters. Gradient mode stays on while probing
//! because a loss may differentiate with respect to its own inputs (a
//! gradient penalty, for instance).

use crate::{Bound, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|)` over scalars
    /// whose gradients exceed the absolute floor.
    pub max_rel_error: f64,
    /// Worst absolute error over all scalars.
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    /// Relative tolerance with an absolute floor for near-zero gradients.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

/// Compare analytic gradients of `loss` against central differences with
/// step `h`, for every scalar of every parameter in `store`.
///
/// Entries with `max(|analytic|, |numeric|) < abs_floor` are left out of the
/// relative error and only contribute to `max_abs_error`.
pub fn check_gradients(
    store: &ParamStore<f64>,
    loss: impl Fn(&Bound<f64>) -> Var<f64>,
    h: f64,
    abs_floor: f64,
) -> GradCheckReport {
    let bound = store.bind();
    let l = loss(&bound);
    let grads = l.backward();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, worst: None };
    let mut probe = store.clone();
    for (name, value) in store.iter() {
        let analytic = grads.value_or_zeros(bound.var(name).unwrap());
        for i in 0..value.len() {
            let orig = value.as_slice().unwrap()[i];
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(&probe.bind_frozen()).item();
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(&probe.bind_frozen()).item();
            probe.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let abs = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            let scale = a.abs().max(numeric.abs());
            if scale >= abs_floor {
                let rel = abs / scale;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.to_string(), i, a, numeric));
                }
            }
            report.checked += 1;
        }
    }
    report
}
