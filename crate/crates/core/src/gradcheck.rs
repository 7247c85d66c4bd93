//! Central finite-difference oracle for verifying reverse-mode gradients.
//!
//! Only forward evaluations are used here, never the tape's reverse sweep.

use std::collections::BTreeMap;

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative error with a denominator floor, so gradients that are
/// numerically zero are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `∂f/∂x` by central differences with step `h`.
pub fn numeric_gradient<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: f64) -> Tensor<T> {
    let mut probe = x.clone();
    let hs = T::lit(h);
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + hs;
        let up = f(&probe);
        probe.data_mut()[i] = orig - hs;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (hs + hs));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar coordinates perturbed.
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` over every
/// coordinate of every named parameter.
pub fn check_params<T: Scalar>(
    params: &ParamSet<T>,
    analytic: &BTreeMap<String, Tensor<T>>,
    mut loss: impl FnMut(&ParamSet<T>) -> T,
    h: f64,
    floor: f64,
) -> GradCheckReport {
    let mut probe = params.clone();
    let hs = T::lit(h);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, Tensor::len);
        let grad = analytic.get(&name);
        for i in 0..n {
            let orig = probe.get(&name).expect("param").data()[i];
            probe.get_mut(&name).expect("param").data_mut()[i] = orig + hs;
            let up = loss(&probe);
            probe.get_mut(&name).expect("param").data_mut()[i] = orig - hs;
            let down = loss(&probe);
            probe.get_mut(&name).expect("param").data_mut()[i] = orig;

            let numeric = ((up - down) / (hs + hs)).as_f64();
            let a = grad.map_or(0.0, |g| g.data()[i].as_f64());
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
