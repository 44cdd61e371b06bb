//! Central finite differences and tolerance checks.

/// Step used for every finite-difference comparison.
pub const FD_STEP: f64 = 1e-4;

/// Central-difference gradient of `f` at `point`.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central-difference Jacobian of a vector-valued `f`; row `i` holds `∂f/∂x_i`.
pub fn central_jacobian<F>(mut f: F, point: &[f64], step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * step))
                .collect()
        })
        .collect()
}

/// Worst-case comparison of two gradient vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    /// Largest `|a − b|`.
    pub max_abs_err: f64,
    /// Largest `|a − b| / max(1, |a|)`.
    pub max_scaled_err: f64,
}

impl Comparison {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_scaled_err <= tol
    }
}

/// Compares `analytic` against `reference` with a tolerance of
/// `max(tol, tol·|analytic|)` per entry.
pub fn compare(analytic: &[f64], reference: &[f64]) -> Comparison {
    assert_eq!(analytic.len(), reference.len(), "gradient lengths differ");
    let mut max_abs_err: f64 = 0.0;
    let mut max_scaled_err: f64 = 0.0;
    for (a, r) in analytic.iter().zip(reference) {
        let err = (a - r).abs();
        max_abs_err = max_abs_err.max(err);
        max_scaled_err = max_scaled_err.max(err / a.abs().max(1.0));
    }
    Comparison {
        max_abs_err,
        max_scaled_err,
    }
}

pub fn within(analytic: &[f64], reference: &[f64], tol: f64) -> bool {
    compare(analytic, reference).passes(tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = central_difference(|v| v[0] * v[0] + 3.0 * v[1], &[2.0, -1.0], FD_STEP);
        assert!(within(&g, &[4.0, 3.0], 1e-9));
    }

    #[test]
    fn tolerance_is_relative_for_large_values() {
        let c = compare(&[1000.0], &[1000.005]);
        assert!(c.passes(1e-5));
        assert!(!compare(&[0.0], &[0.001]).passes(1e-5));
    }
}
