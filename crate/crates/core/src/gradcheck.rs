//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Worst entry of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic parameter gradients of the scalar built by `loss` with
/// central differences of step `step` at each `(param, flat index)` entry.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    entries: &[(ParamId, usize)],
    step: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::invalid("gradient check needs a scalar loss"));
    }
    let grads = tape.backward(out).param_grads(&tape, store.len());
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, store)?;
        Ok(t.value(v).item())
    };
    let mut report = GradCheckReport { checked: 0, max_relative_error: 0.0, worst: None };
    for &(id, idx) in entries {
        let analytic = grads[id].as_ref().map_or(0.0, |g| g.data()[idx]);
        let orig = store.get(id).data()[idx];
        store.get_mut(id).data_mut()[idx] = orig + step;
        let plus = eval(store)?;
        store.get_mut(id).data_mut()[idx] = orig - step;
        let minus = eval(store)?;
        store.get_mut(id).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((store.name(id).to_string(), idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Every scalar entry of the listed parameters.
pub fn all_entries(store: &ParamStore, ids: &[ParamId]) -> Vec<(ParamId, usize)> {
    ids.iter().flat_map(|&id| (0..store.get(id).len()).map(move |i| (id, i))).collect()
}

/// A uniform random `fraction` of all scalar parameters (at least one).
pub fn sample_entries(store: &ParamStore, fraction: f64, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let flat: Vec<(ParamId, usize)> = all_entries(store, &(0..store.len()).collect::<Vec<_>>());
    let count = ((flat.len() as f64 * fraction).ceil() as usize).clamp(1, flat.len().max(1));
    if flat.is_empty() {
        return flat;
    }
    let mut picked: Vec<usize> = sample(rng, flat.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| flat[i]).collect()
}
