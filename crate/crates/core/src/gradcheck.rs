//! Central finite differences in 64-bit precision.
//!
//! This module only evaluates forward closures; it never touches the tape,
//! so it stays an independent check on [`crate::autograd`].

use crate::model::CamNet;
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding do not divide by zero.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_grad(x: &Tensor<f64>, step: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Worst finite-difference disagreement for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub count: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Coordinates whose step had to shrink to avoid a region boundary.
    pub refined: usize,
    /// Coordinates where no admissible step was found.
    pub unresolved: usize,
}

/// Compares `analytic` gradients (by parameter name) against central
/// differences of `loss` taken by perturbing each parameter of `model` in turn.
pub fn check_model_grads(
    model: &CamNet<f64>,
    analytic: &[(String, Vec<f64>)],
    step: f64,
    mut loss: impl FnMut(&CamNet<f64>) -> f64,
) -> Vec<ParamReport> {
    let mut probe = model.clone();
    analytic
        .iter()
        .map(|(name, grad)| {
            let mut report = ParamReport {
                name: name.clone(),
                count: grad.len(),
                max_relative_error: 0.0,
                worst_index: 0,
                worst_analytic: 0.0,
                worst_numeric: 0.0,
                refined: 0,
                unresolved: 0,
            };
            for (i, &a) in grad.iter().enumerate() {
                let orig = probe.param(name).expect("analytic names come from the model").data()[i];
                let mut eval = |v: f64| {
                    probe.param_mut(name).expect("checked").data_mut()[i] = v;
                    loss(&probe)
                };
                let n = (eval(orig + step) - eval(orig - step)) / (2.0 * step);
                probe.param_mut(name).expect("checked").data_mut()[i] = orig;
                let err = relative_error(a, n);
                if err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst_index = i;
                    report.worst_analytic = a;
                    report.worst_numeric = n;
                }
            }
            report
        })
        .collect()
}

/// Smallest step [`check_model_grads_piecewise`] will try.
pub const MIN_STEP: f64 = 1e-7;

/// Like [`check_model_grads`] for piecewise-smooth losses.
///
/// `region` identifies the smooth piece a model lies in (for example its
/// ReLU activation pattern). A coordinate is differenced with `step` when
/// both `θ ± step` stay in the region of `θ`; otherwise the step is halved
/// until they do (down to [`MIN_STEP`]), and the coordinate is counted as
/// `refined`, or `unresolved` if no admissible step exists.
pub fn check_model_grads_piecewise<R: PartialEq>(
    model: &CamNet<f64>,
    analytic: &[(String, Vec<f64>)],
    step: f64,
    mut loss: impl FnMut(&CamNet<f64>) -> f64,
    mut region: impl FnMut(&CamNet<f64>) -> R,
) -> Vec<ParamReport> {
    let home = region(model);
    let mut probe = model.clone();
    analytic
        .iter()
        .map(|(name, grad)| {
            let mut report = ParamReport {
                name: name.clone(),
                count: grad.len(),
                max_relative_error: 0.0,
                worst_index: 0,
                worst_analytic: 0.0,
                worst_numeric: 0.0,
                refined: 0,
                unresolved: 0,
            };
            for (i, &a) in grad.iter().enumerate() {
                let orig = probe.param(name).expect("analytic names come from the model").data()[i];
                let mut h = step;
                let numeric = loop {
                    let mut side = |v: f64| {
                        probe.param_mut(name).expect("checked").data_mut()[i] = v;
                        (loss(&probe), region(&probe) == home)
                    };
                    let (up, up_ok) = side(orig + h);
                    let (down, down_ok) = side(orig - h);
                    if up_ok && down_ok {
                        break (up - down) / (2.0 * h);
                    }
                    if h / 2.0 < MIN_STEP {
                        report.unresolved += 1;
                        break (up - down) / (2.0 * h);
                    }
                    h /= 2.0;
                };
                if h < step {
                    report.refined += 1;
                }
                probe.param_mut(name).expect("checked").data_mut()[i] = orig;
                let err = relative_error(a, numeric);
                if err > report.max_relative_error {
                    report.max_relative_error = err;
                    report.worst_index = i;
                    report.worst_analytic = a;
                    report.worst_numeric = numeric;
                }
            }
            report
        })
        .collect()
}
