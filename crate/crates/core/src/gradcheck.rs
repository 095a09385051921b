//! Central finite differences for checking hand-written and taped gradients.

use crate::autodiff::{Graph, Var};
use crate::tensor::Matrix;

/// Central-difference gradient of a scalar function of a matrix argument.
pub fn central_difference(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Central-difference gradient of a scalar function of a slice.
pub fn central_difference_vec(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let m = Matrix::row_vector(x);
    central_difference(&m, h, |p| f(p.as_slice())).into_vec()
}

/// Normwise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error
/// when both norms are below `1e-12`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    relative_error_slices(a.as_slice(), b.as_slice())
}

pub fn relative_error_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Builds `build(x)` on a fresh tape, differentiates it, and compares the
/// result with central differences. Returns the normwise relative error.
pub fn check_gradient(x: &Matrix, h: f64, build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.param(x);
    let loss = build(&mut g, v);
    let analytic = g.backward(loss).wrt(v);
    let numeric = central_difference(x, h, |p| {
        let mut h = Graph::new();
        let v = h.constant(p.clone());
        let l = build(&mut h, v);
        h.scalar(l)
    });
    relative_error(&analytic, &numeric)
}
