//! Central finite-difference helpers used by the black-box constructors.
//!
//! Steps are scaled per coordinate as `base * max(1, |x_c|)`. First
//! derivatives default to `base = 1e-6`; direct second-difference formulas
//! use a wider `1e-4` base so round-off does not dominate.

use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};

/// Default step base for first derivatives.
pub fn default_step<T: Real>() -> T {
    T::of(1e-6)
}

/// Default step base for direct second differences.
pub fn default_second_step<T: Real>() -> T {
    T::of(1e-4)
}

#[inline]
fn step_at<T: Real>(base: T, x: T) -> T {
    base * T::one().max(x.abs())
}

/// Gradient of a scalar field by central differences.
pub fn gradient<T: Real>(f: &dyn Fn(&DVector<T>) -> T, q: &DVector<T>, base: T) -> DVector<T> {
    let k = q.len();
    let mut g = DVector::zeros(k);
    let mut qp = q.clone();
    let mut qm = q.clone();
    for c in 0..k {
        let h = step_at(base, q[c]);
        qp[c] = q[c] + h;
        qm[c] = q[c] - h;
        g[c] = (f(&qp) - f(&qm)) / (T::of(2.0) * h);
        qp[c] = q[c];
        qm[c] = q[c];
    }
    g
}

/// Jacobian of a vector field by central differences; rows index the output.
pub fn jacobian<T: Real>(
    f: &dyn Fn(&DVector<T>) -> DVector<T>,
    q: &DVector<T>,
    base: T,
) -> DMatrix<T> {
    let k = q.len();
    let sample = f(q);
    let m = sample.len();
    let mut jac = DMatrix::zeros(m, k);
    let mut qp = q.clone();
    let mut qm = q.clone();
    for c in 0..k {
        let h = step_at(base, q[c]);
        qp[c] = q[c] + h;
        qm[c] = q[c] - h;
        let col = (f(&qp) - f(&qm)) / (T::of(2.0) * h);
        jac.set_column(c, &col);
        qp[c] = q[c];
        qm[c] = q[c];
    }
    jac
}

/// Coordinate derivatives of a matrix field: element `c` of the result is
/// the central difference of `f` along `q^c`.
pub fn matrix_derivative<T: Real>(
    f: &dyn Fn(&DVector<T>) -> DMatrix<T>,
    q: &DVector<T>,
    base: T,
) -> Vec<DMatrix<T>> {
    let k = q.len();
    let mut out = Vec::with_capacity(k);
    let mut qp = q.clone();
    let mut qm = q.clone();
    for c in 0..k {
        let h = step_at(base, q[c]);
        qp[c] = q[c] + h;
        qm[c] = q[c] - h;
        out.push((f(&qp) - f(&qm)) / (T::of(2.0) * h));
        qp[c] = q[c];
        qm[c] = q[c];
    }
    out
}

/// Hessian of a scalar field by the four-point second-difference formula.
pub fn hessian<T: Real>(f: &dyn Fn(&DVector<T>) -> T, q: &DVector<T>, base: T) -> DMatrix<T> {
    let k = q.len();
    let mut h_mat = DMatrix::zeros(k, k);
    let f0 = f(q);
    for i in 0..k {
        let hi = step_at(base, q[i]);
        for j in 0..=i {
            let hj = step_at(base, q[j]);
            let mut qq = q.clone();
            let val = if i == j {
                qq[i] = q[i] + hi;
                let fp = f(&qq);
                qq[i] = q[i] - hi;
                let fm = f(&qq);
                (fp - T::of(2.0) * f0 + fm) / (hi * hi)
            } else {
                qq[i] = q[i] + hi;
                qq[j] = q[j] + hj;
                let fpp = f(&qq);
                qq[j] = q[j] - hj;
                let fpm = f(&qq);
                qq[i] = q[i] - hi;
                qq[j] = q[j] + hj;
                let fmp = f(&qq);
                qq[j] = q[j] - hj;
                let fmm = f(&qq);
                (fpp - fpm - fmp + fmm) / (T::of(4.0) * hi * hj)
            };
            h_mat[(i, j)] = val;
            h_mat[(j, i)] = val;
        }
    }
    h_mat
}

/// Mixed second derivative `d²f/dx^i dy^j` of a scalar field of two vector
/// arguments, by the four-point formula. Rows index `x`, columns `y`.
pub fn mixed_second<T: Real>(
    f: &dyn Fn(&DVector<T>, &DVector<T>) -> T,
    x: &DVector<T>,
    y: &DVector<T>,
    base: T,
) -> DMatrix<T> {
    let nx = x.len();
    let ny = y.len();
    let mut out = DMatrix::zeros(nx, ny);
    let mut xx = x.clone();
    let mut yy = y.clone();
    for i in 0..nx {
        let hi = step_at(base, x[i]);
        for j in 0..ny {
            let hj = step_at(base, y[j]);
            xx[i] = x[i] + hi;
            yy[j] = y[j] + hj;
            let fpp = f(&xx, &yy);
            yy[j] = y[j] - hj;
            let fpm = f(&xx, &yy);
            xx[i] = x[i] - hi;
            yy[j] = y[j] + hj;
            let fmp = f(&xx, &yy);
            yy[j] = y[j] - hj;
            let fmm = f(&xx, &yy);
            out[(i, j)] = (fpp - fpm - fmp + fmm) / (T::of(4.0) * hi * hj);
            xx[i] = x[i];
            yy[j] = y[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gradient_of_quadratic() {
        let f = |q: &DVector<f64>| q[0] * q[0] + 3.0 * q[0] * q[1];
        let q = DVector::from_vec(vec![2.0, -1.0]);
        let g = gradient(&f, &q, default_step());
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(g[1], 6.0, epsilon = 1e-8);
    }

    #[test]
    fn hessian_of_quartic() {
        let f = |q: &DVector<f64>| q[0].powi(4) + q[0] * q[1] * q[1];
        let q = DVector::from_vec(vec![1.5, 0.5]);
        let h = hessian(&f, &q, default_second_step());
        assert_relative_eq!(h[(0, 0)], 12.0 * 1.5 * 1.5, epsilon = 1e-6);
        assert_relative_eq!(h[(0, 1)], 1.0, epsilon = 1e-6);
        assert_relative_eq!(h[(1, 1)], 3.0, epsilon = 1e-6);
    }
}
