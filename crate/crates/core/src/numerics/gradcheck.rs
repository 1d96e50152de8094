//! Finite-difference verification of analytic derivatives.

use nalgebra::DMatrix;

use super::tensor::Tensor;

/// Worst coordinate-wise relative error between the analytic gradient of `f`
/// at `x` and central differences `(f(x+eps) - f(x-eps)) / 2eps`.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    assert!(eps > 0.0);
    let (_, analytic) = f(x);
    assert_eq!(analytic.shape(), x.shape(), "gradient shape must match input");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe).0;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe).0;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Central-difference Jacobian of a vector map: `J[i][j] = ∂out_i / ∂in_j`.
pub fn numerical_jacobian<F>(f: F, x: &[f64], eps: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = f(x).len();
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + eps;
        let fp = f(&probe);
        probe[j] = x[j] - eps;
        let fm = f(&probe);
        probe[j] = x[j];
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    jac
}

/// `log |det M|` of a square matrix via LU; `-inf` when singular.
pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant().abs().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::sigmoid;

    #[test]
    fn sum_of_squares_matches() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_diff_check(|t| (t.data().iter().map(|v| v * v).sum(), t.map(|v| 2.0 * v)), &x, 1e-5);
        assert!(err < 1e-8, "{err}");
        let (_, g) = (0.0, x.map(|v| 2.0 * v));
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::scalar(0.0);
        let f = |t: &Tensor| {
            let s = sigmoid(t.item());
            (s, Tensor::scalar(s * (1.0 - s)))
        };
        assert!(finite_diff_check(f, &x, 1e-5) < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::vector(vec![0.5, -1.0]);
        let err = finite_diff_check(|t| (t.data().iter().map(|v| v * v).sum(), t.map(|v| 3.0 * v)), &x, 1e-5);
        assert!(err > 0.3);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let jac = numerical_jacobian(|v| vec![2.0 * v[0] + v[1], 3.0 * v[1]], &[0.3, 0.7], 1e-6);
        assert!((log_abs_det(&jac) - 6f64.ln()).abs() < 1e-8);
    }
}
