//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::{Tape, Var};
use crate::{Error, Result, Scalar};

/// Gradients smaller than this are compared absolutely rather than relatively.
const ABS_FLOOR: f64 = 1e-4;

/// Worst disagreement found in one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub loss: f64,
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of `objective` with central differences for every
/// element of every trainable parameter in `store`.
///
/// The objective is evaluated on inference-mode tapes and must be a pure
/// function of the parameters; an objective that returns two different
/// values at the same point is rejected with a usage error.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, step: f64, tolerance: f64, mut objective: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = objective(&mut tape, store)?;
    let loss_value = tape.item(loss)?.to_f64_lossy();

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = objective(&mut tape, store)?;
        Ok(tape.item(loss)?.to_f64_lossy())
    };
    if eval(store)?.to_bits() != loss_value.to_bits() {
        return Err(Error::usage("objective is not deterministic (is dropout enabled?)"));
    }
    tape.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.absorb(&tape);

    let mut params = Vec::new();
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    for id in ids {
        let grad: Vec<f64> = analytic.get(id).grad.as_ref().expect("absorbed").iter().map(|v| v.to_f64_lossy()).collect();
        let mut report = ParamError {
            name: store.name(id).to_string(),
            numel: grad.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (j, &a) in grad.iter().enumerate() {
            let original = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = T::of(original.to_f64_lossy() + step);
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = T::of(original.to_f64_lossy() - step);
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            if err > report.max_rel_err || j == 0 {
                report.max_rel_err = err;
                report.worst_index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        params.push(report);
    }
    Ok(GradCheckReport { step, tolerance, loss: loss_value, params })
}
