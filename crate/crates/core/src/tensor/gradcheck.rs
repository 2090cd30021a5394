/// Denominator floor for [`relative_error`]. Below it the comparison is
/// effectively absolute, so gradients that cancel to roundoff noise do not
/// register as failures.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Something with a flat vector of differentiable inputs and a scalar loss.
pub trait GradCheckable {
    /// Current point, flattened.
    fn point(&self) -> Vec<f64>;
    fn set_point(&mut self, x: &[f64]);
    /// Loss at the current point.
    fn loss(&mut self) -> f64;
    /// Analytic gradient at the current point.
    fn gradient(&mut self) -> Vec<f64>;
    /// Fingerprint of the piecewise-linear regime (e.g. ReLU sign pattern)
    /// after the last `loss` call. Coordinates whose perturbation changes it
    /// straddle a kink and are skipped.
    fn regime(&self) -> Option<Vec<bool>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

/// Central finite differences of `f` at `x`.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Compares the analytic gradient of `module` against central differences
/// with step `eps` and reports the worst relative error. The module is left
/// at its original point.
pub fn grad_check<M: GradCheckable + ?Sized>(module: &mut M, eps: f64) -> GradCheckReport {
    let x = module.point();
    module.set_point(&x);
    module.loss();
    let base_regime = module.regime();
    let analytic = module.gradient();
    assert_eq!(analytic.len(), x.len(), "gradient length must match point");

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        module.set_point(&probe);
        let up = module.loss();
        let up_regime = module.regime();
        probe[i] = x[i] - eps;
        module.set_point(&probe);
        let down = module.loss();
        let down_regime = module.regime();
        probe[i] = x[i];
        if up_regime != base_regime || down_regime != base_regime {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst_index.is_none() {
            report.max_relative_error = err;
            report.worst_index = Some(i);
        }
    }
    module.set_point(&x);
    report
}
