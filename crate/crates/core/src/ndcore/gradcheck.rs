//! Central finite-difference checks against the tape's reverse pass.
//!
//! The numerical side only ever calls the forward closure, so it stays
//! independent of the backward implementation it checks.

use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with an absolute floor, so gradients that are both tiny
/// compare on absolute terms.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of `loss` with central differences of step `h`
/// for every entry of `params`.
pub fn check<F>(store: &mut ParamStore, params: &[ParamId], h: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|&id| store.grad(id).data().to_vec()).collect();
    store.zero_grad();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, store)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (k, &id) in params.iter().enumerate() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_error(analytic[k][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
