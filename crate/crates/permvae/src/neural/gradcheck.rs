//! Central finite-difference gradient checking.

/// Per-parameter comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Indices whose relative error exceeded the tolerance.
    pub failures: Vec<usize>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare `analytic` against central differences of `f` at `params`.
///
/// The relative error is `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps
/// finite-difference noise on near-zero gradients from registering as error.
/// Failures are reported, never raised.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        failures: Vec::new(),
        checked: params.len(),
        tolerance,
    };
    for i in 0..params.len() {
        let original = probe[i];
        probe[i] = original + h;
        let up = f(&probe);
        probe[i] = original - h;
        let down = f(&probe);
        probe[i] = original;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-4);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
        if rel > tolerance {
            report.failures.push(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(w) = w^2 at w = 3: analytic 6
        let report = grad_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-5, 1e-8);
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn constant_loss_has_zero_gradients_both_ways() {
        let report = grad_check(|_| 42.0, &[1.0, -2.0], &[0.0, 0.0], 1e-5, 1e-10);
        assert!(report.passed());
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_flagged_not_raised() {
        let report = grad_check(|p| p[0] * p[0], &[3.0], &[5.0], 1e-5, 1e-4);
        assert!(!report.passed());
        assert_eq!(report.failures, vec![0]);
        assert!(report.max_rel_err > 0.1);
    }
}
