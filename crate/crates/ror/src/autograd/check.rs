//! Finite-difference verification of analytic gradients.
//!
//! Central differences with a per-coordinate step `h * max(1, |x|)` give
//! ~1e-9 accuracy on well-scaled f64 problems, comfortably below the 1e-3
//! tolerance the gradient tests pin.

/// Outcome of a gradient check: the worst coordinate and its error.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares `analytic` against central finite differences of `f` at `x0`.
///
/// The relative error denominator is floored at 1e-4 so coordinates whose
/// true gradient is essentially zero do not drown the check in roundoff
/// noise, while genuine sign or scale errors at small magnitudes still fail.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheck {
    assert_eq!(x0.len(), analytic.len(), "gradient length mismatch");
    let mut check = GradCheck {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut x = x0.to_vec();
    for i in 0..x.len() {
        let hi = h * x0[i].abs().max(1.0);
        x[i] = x0[i] + hi;
        let fp = f(&x);
        x[i] = x0[i] - hi;
        let fm = f(&x);
        x[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * hi);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        if rel > check.max_rel_err {
            check.max_rel_err = rel;
            check.worst_index = i;
            check.analytic_at_worst = a;
            check.numeric_at_worst = numeric;
        }
    }
    check
}
