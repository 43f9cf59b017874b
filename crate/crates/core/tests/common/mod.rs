//! Shared numerics for the oracle tests: finite differences and plain
//! Monte-Carlo error bars, written against no crate internals so the tests
//! stay independent of the code they grade.

// Each test binary links this module separately and uses its own subset.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Central-difference gradient of a scalar field.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Jacobian of a vector field, one column per coordinate.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let dim_out = f(x).len();
    let mut j = DMatrix::zeros(dim_out, x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        j.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    j
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Sample covariance of paired draws plus its jackknife-free standard error
/// estimate `sd(products) / sqrt(n)`.
pub fn cov_se(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let (mx, _) = mean_se(xs);
    let (my, _) = mean_se(ys);
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    mean_se(&prods)
}

/// Asserts `|got - want| <= k * se`, with a readable failure message.
pub fn assert_within_se(got: f64, want: f64, se: f64, k: f64, what: &str) {
    let dev = (got - want).abs();
    assert!(
        dev <= k * se,
        "{what}: got {got}, want {want}, |dev| = {dev:.3e} > {k} * se = {:.3e}",
        k * se
    );
}
