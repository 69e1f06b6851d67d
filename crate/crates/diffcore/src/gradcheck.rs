//! Central finite differences, used to audit analytic gradients.
//!
//! Nothing here touches the reverse pass: every value is obtained by
//! re-evaluating a forward function at perturbed inputs.

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps gradients that are zero
/// (or round-off sized) from producing meaningless ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Numeric gradient of a scalar function of one tensor.
pub fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst disagreement found by [`check_params`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares the gradients currently stored in `store` against central
/// differences of `loss` for every entry of the selected parameters
/// (all parameters when `only` is `None`).
pub fn check_params(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    step: f64,
    floor: f64,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for id in ids {
        let analytic = store.grad(id).clone();
        for i in 0..analytic.numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let plus = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig - step;
            let minus = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst_param = store.get(id).name().to_string();
                report.worst_index = i;
                report.worst_analytic = analytic.data()[i];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
