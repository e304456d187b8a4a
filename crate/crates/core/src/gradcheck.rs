//! Central finite-difference comparison against analytic gradients.

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the parameter with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: Self, offset: usize) -> Self {
        if other.max_rel_err > self.max_rel_err {
            Self {
                worst_index: other.worst_index + offset,
                checked: self.checked + other.checked,
                ..other
            }
        } else {
            Self {
                checked: self.checked + other.checked,
                ..self
            }
        }
    }
}

/// Perturbs every entry of `params` by `±eps` and compares
/// `(f(x + eps) - f(x - eps)) / 2eps` with `analytic`.
pub fn check_gradient(
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: params.len(),
    };
    for i in 0..params.len() {
        x[i] = params[i] + eps;
        let plus = f(&x);
        x[i] = params[i] - eps;
        let minus = f(&x);
        x[i] = params[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_err(analytic[i], numeric);
        if err > report.max_rel_err || !err.is_finite() {
            report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}
