//! Central finite-difference gradient verification, run in f64.

/// Compares an analytical gradient against (f(x+e) - f(x-e)) / 2e and
/// returns the maximum relative error over all coordinates.
///
/// `f` evaluates the scalar objective at the current parameter vector;
/// `params` is mutated in place during probing and restored afterwards.
pub fn max_rel_error<F>(mut f: F, params: &mut [f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let fp = f(params);
        params[i] = orig - eps;
        let fm = f(params);
        params[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
