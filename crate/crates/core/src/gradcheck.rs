//! Central finite-difference gradient verification. Lives in the library
//! (not just test code) because the CLI selfcheck runs the same suite.
//!
//! The numeric oracle evaluates the forward pass twice per coordinate and
//! never touches the tape's backward machinery, so it is independent of the
//! path it checks.

/// Default step for central differences in double precision.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Relative-error floor. Central differences on an O(1) loss carry roughly
/// 1e-8..1e-7 of absolute truncation/rounding noise; below this magnitude a
/// relative comparison would amplify oracle noise rather than detect bugs.
pub const REL_FLOOR: f64 = 1e-3;

/// Central finite differences of `f` around `x`, one coordinate at a time.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let hi = f(&work);
        work[i] = orig - h;
        let lo = f(&work);
        work[i] = orig;
        out.push((hi - lo) / (2.0 * h));
    }
    out
}

/// max_i |a_i − b_i| / max(|a_i|, |b_i|, floor)
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let fd = central_difference(|x| x[0] * x[0], &[3.0], DEFAULT_STEP);
        assert!((fd[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floors_small_magnitudes() {
        // absolute noise of 1e-8 on a zero gradient must not register as error
        let err = max_relative_error(&[0.0], &[1e-8]);
        assert!(err < 1e-4);
    }
}
