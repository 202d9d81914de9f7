//! Central finite-difference verification of analytic gradients.

use crate::nn::params::ParamSet;

/// A scalar loss over a parameter set, with its analytic gradient.
/// Both methods must be deterministic functions of `params` (reseed any
/// dropout masks from a fixed seed on every call).
pub trait Objective {
    fn loss(&self, params: &ParamSet) -> f64;
    fn loss_and_grad(&self, params: &ParamSet) -> (f64, ParamSet);
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor in the relative error, so gradients that are
    /// numerically zero compare on an absolute scale.
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

pub fn check_gradients<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamSet,
    options: GradCheckOptions,
) -> GradCheckReport {
    let (_, grads) = objective.loss_and_grad(params);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        tolerance: options.tolerance,
    };
    for t in 0..params.tensors.len() {
        let len = params.tensors[t].len();
        let stride = match options.max_per_tensor {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        for i in (0..len).step_by(stride) {
            let orig = probe.tensors[t].data[i];
            probe.tensors[t].data[i] = orig + options.step;
            let plus = objective.loss(&probe);
            probe.tensors[t].data[i] = orig - options.step;
            let minus = objective.loss(&probe);
            probe.tensors[t].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * options.step);
            let analytic = grads.tensors[t].data[i];
            let err = relative_error(analytic, numeric, options.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((params.tensors[t].name.clone(), i, analytic, numeric));
                }
            }
        }
    }
    report
}
