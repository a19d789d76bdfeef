//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates a user-supplied forward closure; it knows
//! nothing about the tape, so it stays an independent oracle for the
//! analytic gradients produced by [`super::Graph::backward`].

/// Default perturbation for central differences.
pub const DEFAULT_H: f64 = 1e-4;

/// Default relative-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Numeric gradient of `f` w.r.t. every entry of every input, via central
/// differences with step `h`. `f` must be a pure function of the inputs.
pub fn finite_diff_grads<F>(mut f: F, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads: Vec<Vec<f64>> = inputs.iter().map(|v| vec![0.0; v.len()]).collect();
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + h;
            let fp = f(&work);
            work[i][j] = orig - h;
            let fm = f(&work);
            work[i][j] = orig;
            grads[i][j] = (fp - fm) / (2.0 * h);
        }
    }
    grads
}

/// Relative error with a unit floor: |a - b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Largest relative error between analytic and numeric gradients.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for (ga, gn) in analytic.iter().zip(numeric.iter()) {
        assert_eq!(ga.len(), gn.len(), "gradient length mismatch");
        for (&a, &n) in ga.iter().zip(gn.iter()) {
            worst = worst.max(rel_err(a, n));
        }
    }
    worst
}

/// Convenience: check analytic gradients against central differences and
/// return the worst relative error.
pub fn check<F>(f: F, inputs: &[Vec<f64>], analytic: &[Vec<f64>]) -> f64
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let numeric = finite_diff_grads(f, inputs, DEFAULT_H);
    max_rel_err(analytic, &numeric)
}
