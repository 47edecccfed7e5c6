//! The three constraint families, their calculus, and integrability
//! diagnostics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::PhaseFn;
use crate::error::{Error, Result};
use crate::fd;
use crate::manifold::{PointFn, Provenance};
use crate::scalar::Real;

/// Relative rank tolerance for "functionally independent".
pub fn rank_tolerance<T: Real>() -> T {
    T::of(1e-10)
}

/// Configuration constraints `F_a(q) = 0`.
#[derive(Clone)]
pub struct HolonomicConstraints<T: Real> {
    count: usize,
    dim: usize,
    residual: PointFn<T, DVector<T>>,
    /// `dF_a/dq^i`, `m x k`.
    jacobian: PointFn<T, DMatrix<T>>,
    /// Per constraint `a`: the Hessian `d²F_a/dq^i dq^j`.
    hessian: PointFn<T, Vec<DMatrix<T>>>,
    provenance: Provenance<T>,
}

fn check_counts<T: Real>(count: usize, dim: usize) -> Result<()> {
    if count == 0 || count >= dim {
        return Err(Error::Configuration(format!(
            "need 1 <= m < k, got m = {count}, k = {dim}"
        )));
    }
    let _ = T::zero();
    Ok(())
}

impl<T: Real> HolonomicConstraints<T> {
    pub fn new_analytic(
        dim: usize,
        count: usize,
        residual: PointFn<T, DVector<T>>,
        jacobian: PointFn<T, DMatrix<T>>,
        hessian: PointFn<T, Vec<DMatrix<T>>>,
    ) -> Result<Self> {
        check_counts::<T>(count, dim)?;
        Ok(Self {
            count,
            dim,
            residual,
            jacobian,
            hessian,
            provenance: Provenance::Analytic,
        })
    }

    /// Derivatives from the residual alone: Jacobian by central differences,
    /// Hessians by direct second differences.
    pub fn from_residual(dim: usize, count: usize, residual: PointFn<T, DVector<T>>) -> Result<Self> {
        let h1 = fd::default_step::<T>();
        let h2 = fd::default_second_step::<T>();
        let r1 = residual.clone();
        let jacobian: PointFn<T, DMatrix<T>> =
            Arc::new(move |q| fd::jacobian(&|p: &DVector<T>| r1(p), q, h1));
        let r2 = residual.clone();
        let hessian: PointFn<T, Vec<DMatrix<T>>> = Arc::new(move |q| {
            (0..count)
                .map(|a| fd::hessian(&|p: &DVector<T>| r2(p)[a], q, h2))
                .collect()
        });
        check_counts::<T>(count, dim)?;
        Ok(Self {
            count,
            dim,
            residual,
            jacobian,
            hessian,
            provenance: Provenance::FiniteDifference { step: h1 },
        })
    }

    /// Analytic Jacobian; Hessians as a single central difference of it.
    pub fn from_jacobian(
        dim: usize,
        count: usize,
        residual: PointFn<T, DVector<T>>,
        jacobian: PointFn<T, DMatrix<T>>,
    ) -> Result<Self> {
        check_counts::<T>(count, dim)?;
        let h1 = fd::default_step::<T>();
        let j = jacobian.clone();
        let hessian: PointFn<T, Vec<DMatrix<T>>> = Arc::new(move |q| {
            let stacks = fd::matrix_derivative(&|p: &DVector<T>| j(p), q, h1);
            (0..count)
                .map(|a| {
                    let k = q.len();
                    let mut h = DMatrix::zeros(k, k);
                    for (c, stack) in stacks.iter().enumerate() {
                        for i in 0..k {
                            h[(i, c)] = stack[(a, i)];
                        }
                    }
                    // symmetrize away finite-difference noise
                    let ht = h.transpose();
                    (h + ht) * T::of(0.5)
                })
                .collect()
        });
        Ok(Self {
            count,
            dim,
            residual,
            jacobian,
            hessian,
            provenance: Provenance::FiniteDifference { step: h1 },
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance<T> {
        self.provenance
    }

    pub fn residual(&self, q: &DVector<T>) -> DVector<T> {
        (self.residual)(q)
    }

    pub fn jacobian(&self, q: &DVector<T>) -> DMatrix<T> {
        (self.jacobian)(q)
    }

    pub fn hessians(&self, q: &DVector<T>) -> Vec<DMatrix<T>> {
        (self.hessian)(q)
    }
}

/// Velocity-affine constraints `omega_ai(q) v^i + f_a(q) = 0`.
#[derive(Clone)]
pub struct PfaffianConstraints<T: Real> {
    count: usize,
    dim: usize,
    coefficients: PointFn<T, DMatrix<T>>,
    /// Per constraint `a`: matrix with `(i, j)` entry `d omega_ai / dq^j`.
    coefficient_derivative: PointFn<T, Vec<DMatrix<T>>>,
    /// Inhomogeneous part and its Jacobian; `None` means identically zero.
    inhomogeneous: Option<(PointFn<T, DVector<T>>, PointFn<T, DMatrix<T>>)>,
}

impl<T: Real> PfaffianConstraints<T> {
    pub fn homogeneous(
        dim: usize,
        count: usize,
        coefficients: PointFn<T, DMatrix<T>>,
        coefficient_derivative: PointFn<T, Vec<DMatrix<T>>>,
    ) -> Result<Self> {
        check_counts::<T>(count, dim)?;
        Ok(Self {
            count,
            dim,
            coefficients,
            coefficient_derivative,
            inhomogeneous: None,
        })
    }

    /// Homogeneous constraints with coefficient derivatives by central
    /// differences.
    pub fn from_coefficients(
        dim: usize,
        count: usize,
        coefficients: PointFn<T, DMatrix<T>>,
    ) -> Result<Self> {
        let c = coefficients.clone();
        let h1 = fd::default_step::<T>();
        let coefficient_derivative: PointFn<T, Vec<DMatrix<T>>> = Arc::new(move |q| {
            let stacks = fd::matrix_derivative(&|p: &DVector<T>| c(p), q, h1);
            let k = q.len();
            (0..count)
                .map(|a| {
                    let mut d = DMatrix::zeros(k, k);
                    for (j, stack) in stacks.iter().enumerate() {
                        for i in 0..k {
                            d[(i, j)] = stack[(a, i)];
                        }
                    }
                    d
                })
                .collect()
        });
        Self::homogeneous(dim, count, coefficients, coefficient_derivative)
    }

    pub fn with_inhomogeneous(
        mut self,
        value: PointFn<T, DVector<T>>,
        jacobian: PointFn<T, DMatrix<T>>,
    ) -> Self {
        self.inhomogeneous = Some((value, jacobian));
        self
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_homogeneous(&self) -> bool {
        self.inhomogeneous.is_none()
    }

    pub fn coefficients(&self, q: &DVector<T>) -> DMatrix<T> {
        (self.coefficients)(q)
    }

    pub fn coefficient_derivatives(&self, q: &DVector<T>) -> Vec<DMatrix<T>> {
        (self.coefficient_derivative)(q)
    }

    pub fn inhomogeneous_value(&self, q: &DVector<T>) -> DVector<T> {
        match &self.inhomogeneous {
            Some((value, _)) => value(q),
            None => DVector::zeros(self.count),
        }
    }

    pub fn inhomogeneous_jacobian(&self, q: &DVector<T>) -> DMatrix<T> {
        match &self.inhomogeneous {
            Some((_, jac)) => jac(q),
            None => DMatrix::zeros(self.count, self.dim),
        }
    }

    pub fn residual(&self, q: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        self.coefficients(q) * v + self.inhomogeneous_value(q)
    }
}

/// General first-order constraints `F_a(q, v) = 0`, possibly nonlinear in
/// the velocities.
#[derive(Clone)]
pub struct VelocityConstraints<T: Real> {
    count: usize,
    dim: usize,
    residual: PhaseFn<T, DVector<T>>,
    df_dq: PhaseFn<T, DMatrix<T>>,
    df_dv: PhaseFn<T, DMatrix<T>>,
    /// Per constraint `a`: `(i, j)` entry `d²F_a/dv^i dq^j`.
    d2f_dvdq: PhaseFn<T, Vec<DMatrix<T>>>,
    /// Per constraint `a`: `(i, j)` entry `d²F_a/dv^i dv^j`.
    d2f_dvdv: PhaseFn<T, Vec<DMatrix<T>>>,
}

impl<T: Real> VelocityConstraints<T> {
    pub fn new_analytic(
        dim: usize,
        count: usize,
        residual: PhaseFn<T, DVector<T>>,
        df_dq: PhaseFn<T, DMatrix<T>>,
        df_dv: PhaseFn<T, DMatrix<T>>,
        d2f_dvdq: PhaseFn<T, Vec<DMatrix<T>>>,
        d2f_dvdv: PhaseFn<T, Vec<DMatrix<T>>>,
    ) -> Result<Self> {
        check_counts::<T>(count, dim)?;
        Ok(Self {
            count,
            dim,
            residual,
            df_dq,
            df_dv,
            d2f_dvdq,
            d2f_dvdv,
        })
    }

    /// All derivatives by finite differences from the residual.
    pub fn from_residual(dim: usize, count: usize, residual: PhaseFn<T, DVector<T>>) -> Result<Self> {
        check_counts::<T>(count, dim)?;
        let h1 = fd::default_step::<T>();
        let h2 = fd::default_second_step::<T>();
        let r1 = residual.clone();
        let df_dq: PhaseFn<T, DMatrix<T>> =
            Arc::new(move |q, v| fd::jacobian(&|p: &DVector<T>| r1(p, v), q, h1));
        let r2 = residual.clone();
        let df_dv: PhaseFn<T, DMatrix<T>> =
            Arc::new(move |q, v| fd::jacobian(&|w: &DVector<T>| r2(q, w), v, h1));
        let r3 = residual.clone();
        let d2f_dvdq: PhaseFn<T, Vec<DMatrix<T>>> = Arc::new(move |q, v| {
            (0..count)
                .map(|a| {
                    fd::mixed_second(
                        &|w: &DVector<T>, p: &DVector<T>| r3(p, w)[a],
                        v,
                        q,
                        h2,
                    )
                })
                .collect()
        });
        let r4 = residual.clone();
        let d2f_dvdv: PhaseFn<T, Vec<DMatrix<T>>> = Arc::new(move |q, v| {
            (0..count)
                .map(|a| fd::hessian(&|w: &DVector<T>| r4(q, w)[a], v, h2))
                .collect()
        });
        Ok(Self {
            count,
            dim,
            residual,
            df_dq,
            df_dv,
            d2f_dvdq,
            d2f_dvdv,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn residual(&self, q: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        (self.residual)(q, v)
    }

    pub fn df_dq(&self, q: &DVector<T>, v: &DVector<T>) -> DMatrix<T> {
        (self.df_dq)(q, v)
    }

    pub fn df_dv(&self, q: &DVector<T>, v: &DVector<T>) -> DMatrix<T> {
        (self.df_dv)(q, v)
    }

    pub fn d2f_dvdq(&self, q: &DVector<T>, v: &DVector<T>) -> Vec<DMatrix<T>> {
        (self.d2f_dvdq)(q, v)
    }

    pub fn d2f_dvdv(&self, q: &DVector<T>, v: &DVector<T>) -> Vec<DMatrix<T>> {
        (self.d2f_dvdv)(q, v)
    }
}

/// Rewrite holonomic constraints in Pfaffian form: `omega = dF/dq`, zero
/// inhomogeneous part, coefficient derivatives wired from the Hessians.
pub fn lift_holonomic_to_pfaffian<T: Real>(h: &HolonomicConstraints<T>) -> PfaffianConstraints<T> {
    let jac = h.jacobian.clone();
    let hess = h.hessian.clone();
    PfaffianConstraints {
        count: h.count,
        dim: h.dim,
        coefficients: Arc::new(move |q| jac(q)),
        coefficient_derivative: Arc::new(move |q| hess(q)),
        inhomogeneous: None,
    }
}

/// Rewrite Pfaffian constraints as velocity constraints
/// `F_a(q, v) = omega_ai v^i + f_a`.
pub fn lift_pfaffian_to_velocity<T: Real>(p: &PfaffianConstraints<T>) -> VelocityConstraints<T> {
    let count = p.count;
    let dim = p.dim;
    let p1 = p.clone();
    let residual: PhaseFn<T, DVector<T>> = Arc::new(move |q, v| p1.residual(q, v));
    let p2 = p.clone();
    let df_dq: PhaseFn<T, DMatrix<T>> = Arc::new(move |q, v| {
        let domega = p2.coefficient_derivatives(q);
        let mut out = p2.inhomogeneous_jacobian(q);
        for (a, da) in domega.iter().enumerate() {
            // dF_a/dq^j = omega_{ai,j} v^i
            for j in 0..dim {
                let mut acc = T::zero();
                for i in 0..dim {
                    acc += da[(i, j)] * v[i];
                }
                out[(a, j)] += acc;
            }
        }
        out
    });
    let p3 = p.clone();
    let df_dv: PhaseFn<T, DMatrix<T>> = Arc::new(move |q, _v| p3.coefficients(q));
    let p4 = p.clone();
    let d2f_dvdq: PhaseFn<T, Vec<DMatrix<T>>> =
        Arc::new(move |q, _v| p4.coefficient_derivatives(q));
    let d2f_dvdv: PhaseFn<T, Vec<DMatrix<T>>> =
        Arc::new(move |_q, _v| vec![DMatrix::zeros(dim, dim); count]);
    VelocityConstraints {
        count,
        dim,
        residual,
        df_dq,
        df_dv,
        d2f_dvdq,
        d2f_dvdv,
    }
}

/// One constraint set of any family.
#[derive(Clone)]
pub enum ConstraintSet<T: Real> {
    Holonomic(HolonomicConstraints<T>),
    Pfaffian(PfaffianConstraints<T>),
    Velocity(VelocityConstraints<T>),
}

impl<T: Real> ConstraintSet<T> {
    pub fn count(&self) -> usize {
        match self {
            Self::Holonomic(c) => c.count(),
            Self::Pfaffian(c) => c.count(),
            Self::Velocity(c) => c.count(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Holonomic(c) => c.dim(),
            Self::Pfaffian(c) => c.dim(),
            Self::Velocity(c) => c.dim(),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Self::Holonomic(_) => "holonomic",
            Self::Pfaffian(_) => "pfaffian",
            Self::Velocity(_) => "velocity",
        }
    }

    /// Constraint residual; `v` is ignored by holonomic sets.
    pub fn residual(&self, q: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        match self {
            Self::Holonomic(c) => c.residual(q),
            Self::Pfaffian(c) => c.residual(q, v),
            Self::Velocity(c) => c.residual(q, v),
        }
    }

    /// Velocity-level residual: the holonomic case reports `dF/dt = (dF/dq) v`,
    /// the other families their own residual.
    pub fn velocity_residual(&self, q: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        match self {
            Self::Holonomic(c) => c.jacobian(q) * v,
            _ => self.residual(q, v),
        }
    }

    /// Velocity gradient of the velocity-level residual.
    pub fn velocity_jacobian(&self, q: &DVector<T>, v: &DVector<T>) -> DMatrix<T> {
        match self {
            Self::Holonomic(c) => c.jacobian(q),
            Self::Pfaffian(c) => c.coefficients(q),
            Self::Velocity(c) => c.df_dv(q, v),
        }
    }
}

/// Coefficients of the acceleration-linear form `A a = b` obtained by
/// differentiating the constraints until accelerations appear: twice for
/// holonomic sets, once for the velocity-level families.
pub fn differentiated_form<T: Real>(
    set: &ConstraintSet<T>,
    q: &DVector<T>,
    v: &DVector<T>,
) -> Result<(DMatrix<T>, DVector<T>)> {
    let (a_mat, b) = match set {
        ConstraintSet::Holonomic(c) => {
            let a_mat = c.jacobian(q);
            let hess = c.hessians(q);
            let mut b = DVector::zeros(c.count());
            for (idx, h) in hess.iter().enumerate() {
                b[idx] = -(v.transpose() * h * v)[(0, 0)];
            }
            (a_mat, b)
        }
        ConstraintSet::Pfaffian(c) => {
            let a_mat = c.coefficients(q);
            let domega = c.coefficient_derivatives(q);
            let df = c.inhomogeneous_jacobian(q) * v;
            let mut b = DVector::zeros(c.count());
            for (a, da) in domega.iter().enumerate() {
                b[a] = -(v.transpose() * da * v)[(0, 0)] - df[a];
            }
            (a_mat, b)
        }
        ConstraintSet::Velocity(c) => {
            let a_mat = c.df_dv(q, v);
            let b = -(c.df_dq(q, v) * v);
            (a_mat, b)
        }
    };
    check_full_row_rank(&a_mat, "differentiated constraint matrix")?;
    Ok((a_mat, b))
}

/// Full-row-rank check at the relative rank tolerance; reports the
/// condition estimate on failure.
pub fn check_full_row_rank<T: Real>(a: &DMatrix<T>, what: &str) -> Result<()> {
    let svd = a.clone().svd(false, false);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if min_sv <= rank_tolerance::<T>() * max_sv {
        return Err(Error::DegenerateConstraint {
            message: format!("{what} is rank deficient"),
            condition: if min_sv > T::zero() {
                (max_sv / min_sv).as_f64()
            } else {
                f64::INFINITY
            },
        });
    }
    Ok(())
}

/// Index of the first row that is linearly dependent on its predecessors,
/// if any. Used to name the offending constraint in validation reports.
pub fn first_dependent_row<T: Real>(a: &DMatrix<T>) -> Option<usize> {
    let k = a.ncols();
    let mut basis: Vec<DVector<T>> = Vec::new();
    for r in 0..a.nrows() {
        let mut row: DVector<T> = a.row(r).transpose();
        let norm0 = row.norm().max(T::of(1e-300));
        for b in &basis {
            let proj = b.dot(&row);
            row -= b * proj;
        }
        if row.norm() <= T::of(1e-10) * norm0 {
            return Some(r);
        }
        let n = row.norm();
        basis.push(row / n);
        if basis.len() == k {
            return if r + 1 < a.nrows() { Some(r + 1) } else { None };
        }
    }
    None
}

/// Pointwise non-integrability diagnostic of a homogeneous Pfaffian system.
///
/// Builds an orthonormal basis of `ker omega(q)`, extends each basis vector
/// to a section of the kernel distribution by projecting it at displaced
/// points, measures the Lie brackets of the sections by central
/// differences, and returns the largest row-normalized component of
/// `omega(q) [X, Y]` over all pairs. Values at round-off scale mean the
/// distribution is involutive at `q`.
pub fn involutivity_defect<T: Real>(p: &PfaffianConstraints<T>, q: &DVector<T>) -> Result<T> {
    if !p.is_homogeneous() {
        return Err(Error::Unsupported(
            "involutivity diagnostic requires a homogeneous Pfaffian system".into(),
        ));
    }
    let k = p.dim();
    let omega0 = p.coefficients(q);
    check_full_row_rank(&omega0, "Pfaffian coefficient matrix")?;

    // Orthonormal kernel basis: project the standard basis onto ker omega
    // and keep the independent directions.
    let kernel_dim = k - p.count();
    let gram0 = &omega0 * omega0.transpose();
    let gram0_lu = gram0.lu();
    let mut basis: Vec<DVector<T>> = Vec::with_capacity(kernel_dim);
    for i in 0..k {
        if basis.len() == kernel_dim {
            break;
        }
        let mut e = DVector::zeros(k);
        e[i] = T::one();
        let mut w = match gram0_lu.solve(&(&omega0 * &e)) {
            Some(y) => e - omega0.transpose() * y,
            None => continue,
        };
        for b in &basis {
            let proj = b.dot(&w);
            w -= b * proj;
        }
        let norm = w.norm();
        if norm > T::of(1e-8) {
            basis.push(w / norm);
        }
    }
    if basis.len() < 2 {
        return Ok(T::zero());
    }

    // Section of the kernel distribution through x: orthogonal projection
    // of the frozen basis vector onto ker omega(p).
    let coeff = p.coefficients.clone();
    let field = move |x: &DVector<T>, dir: &DVector<T>| -> DVector<T> {
        let om = coeff(x);
        let gram = &om * om.transpose();
        match gram.lu().solve(&(&om * dir)) {
            Some(y) => dir - om.transpose() * y,
            None => dir.clone(),
        }
    };

    let h = T::of(1e-5);
    let row_norms: Vec<T> = (0..p.count())
        .map(|a| omega0.row(a).norm().max(T::of(1e-300)))
        .collect();
    let mut worst = T::zero();
    for alpha in 0..basis.len() {
        for beta in (alpha + 1)..basis.len() {
            let xa = &basis[alpha];
            let xb = &basis[beta];
            let fa = |x: &DVector<T>| field(x, xa);
            let fb = |x: &DVector<T>| field(x, xb);
            let ja = fd::jacobian(&fa, q, h);
            let jb = fd::jacobian(&fb, q, h);
            // [X, Y] = (DY) X - (DX) Y at q, where X(q), Y(q) are the basis
            // vectors themselves.
            let bracket = &jb * xa - &ja * xb;
            let image = &omega0 * bracket;
            for a in 0..p.count() {
                let val = (image[a] / row_norms[a]).abs();
                if val > worst {
                    worst = val;
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_circle() -> HolonomicConstraints<f64> {
        HolonomicConstraints::new_analytic(
            2,
            1,
            Arc::new(|q: &DVector<f64>| {
                DVector::from_vec(vec![q[0] * q[0] + q[1] * q[1] - 1.0])
            }),
            Arc::new(|q: &DVector<f64>| DMatrix::from_row_slice(1, 2, &[2.0 * q[0], 2.0 * q[1]])),
            Arc::new(|_q| vec![DMatrix::identity(2, 2) * 2.0]),
        )
        .unwrap()
    }

    fn knife_edge() -> PfaffianConstraints<f64> {
        // xdot sin(theta) - ydot cos(theta) = 0 in (x, y, theta)
        PfaffianConstraints::homogeneous(
            3,
            1,
            Arc::new(|q: &DVector<f64>| {
                DMatrix::from_row_slice(1, 3, &[q[2].sin(), -q[2].cos(), 0.0])
            }),
            Arc::new(|q: &DVector<f64>| {
                let mut d = DMatrix::zeros(3, 3);
                d[(0, 2)] = q[2].cos();
                d[(1, 2)] = q[2].sin();
                vec![d]
            }),
        )
        .unwrap()
    }

    #[test]
    fn lift_circle_to_pfaffian() {
        let lifted = lift_holonomic_to_pfaffian(&unit_circle());
        let q = DVector::from_vec(vec![0.6, 0.8]);
        let om = lifted.coefficients(&q);
        assert_relative_eq!(om[(0, 0)], 1.2, epsilon = 1e-14);
        assert_relative_eq!(om[(0, 1)], 1.6, epsilon = 1e-14);
        assert!(lifted.inhomogeneous_value(&q).amax() == 0.0);
    }

    #[test]
    fn lift_linear_constraints_constant_rows() {
        let rows = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
        let r2 = rows.clone();
        let h = HolonomicConstraints::new_analytic(
            3,
            2,
            Arc::new(move |q: &DVector<f64>| &r2 * q),
            {
                let rows = rows.clone();
                Arc::new(move |_q| rows.clone())
            },
            Arc::new(|_q| vec![DMatrix::zeros(3, 3); 2]),
        )
        .unwrap();
        let lifted = lift_holonomic_to_pfaffian(&h);
        let q = DVector::from_vec(vec![0.3, 1.0, -0.2]);
        assert_relative_eq!(lifted.coefficients(&q)[(0, 2)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(lifted.coefficients(&q)[(1, 1)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn residuals_per_family() {
        let circle = ConstraintSet::Holonomic(unit_circle());
        let on = DVector::from_vec(vec![1.0, 0.0]);
        let off = DVector::from_vec(vec![2.0, 0.0]);
        let v = DVector::zeros(2);
        assert_relative_eq!(circle.residual(&on, &v)[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(circle.residual(&off, &v)[0], 3.0, epsilon = 1e-14);

        let knife = ConstraintSet::Pfaffian(knife_edge());
        let q = DVector::from_vec(vec![0.4, -0.6, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert_relative_eq!(knife.residual(&q, &v)[0], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn lifted_residual_is_time_derivative_of_constraint() {
        let circle = unit_circle();
        let lifted = lift_holonomic_to_pfaffian(&circle);
        // Along the curve q(t) = (cos t, 2 sin t) at t0, compare with the
        // finite difference of F(q(t)).
        let t0 = 0.37f64;
        let curve = |t: f64| DVector::from_vec(vec![t.cos(), 2.0 * t.sin()]);
        let vel = DVector::from_vec(vec![-t0.sin(), 2.0 * t0.cos()]);
        let dt = 1e-6;
        let f = |t: f64| circle.residual(&curve(t))[0];
        let fd_rate = (f(t0 + dt) - f(t0 - dt)) / (2.0 * dt);
        let lifted_rate = lifted.residual(&curve(t0), &vel)[0];
        assert_relative_eq!(fd_rate, lifted_rate, max_relative = 1e-5);
    }

    #[test]
    fn differentiated_form_circle() {
        let set = ConstraintSet::Holonomic(unit_circle());
        let q = DVector::from_vec(vec![1.0, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let (a, b) = differentiated_form(&set, &q, &v).unwrap();
        assert_relative_eq!(a[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(a[(0, 1)], 0.0, epsilon = 1e-14);
        assert_relative_eq!(b[0], -2.0, epsilon = 1e-14);
    }

    #[test]
    fn differentiated_form_linear_holonomic() {
        let c = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let c2 = c.clone();
        let h = HolonomicConstraints::new_analytic(
            3,
            1,
            Arc::new(move |q: &DVector<f64>| &c2 * q),
            {
                let c = c.clone();
                Arc::new(move |_q| c.clone())
            },
            Arc::new(|_q| vec![DMatrix::zeros(3, 3)]),
        )
        .unwrap();
        let set = ConstraintSet::Holonomic(h);
        let (a, b) = differentiated_form(
            &set,
            &DVector::from_vec(vec![1.0, 0.5, 0.0]),
            &DVector::from_vec(vec![0.1, -0.2, 0.3]),
        )
        .unwrap();
        assert_relative_eq!(a[(0, 1)], -2.0, epsilon = 1e-14);
        assert_relative_eq!(b[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn differentiated_form_knife_edge() {
        let set = ConstraintSet::Pfaffian(knife_edge());
        let q = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let omega_z = 0.8;
        let v = DVector::from_vec(vec![1.0, 0.0, omega_z]);
        let (a, b) = differentiated_form(&set, &q, &v).unwrap();
        assert_relative_eq!(a[(0, 0)], 0.0, epsilon = 1e-14);
        assert_relative_eq!(a[(0, 1)], -1.0, epsilon = 1e-14);
        assert_relative_eq!(a[(0, 2)], 0.0, epsilon = 1e-14);
        assert_relative_eq!(b[0], -omega_z, epsilon = 1e-14);
    }

    #[test]
    fn degenerate_rows_are_rejected() {
        let rows = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let r2 = rows.clone();
        let h = HolonomicConstraints::new_analytic(
            3,
            2,
            Arc::new(move |q: &DVector<f64>| &r2 * q),
            {
                let rows = rows.clone();
                Arc::new(move |_q| rows.clone())
            },
            Arc::new(|_q| vec![DMatrix::zeros(3, 3); 2]),
        )
        .unwrap();
        let set = ConstraintSet::Holonomic(h);
        let out = differentiated_form(&set, &DVector::zeros(3), &DVector::zeros(3));
        assert!(matches!(out, Err(Error::DegenerateConstraint { .. })));
    }

    #[test]
    fn dependent_row_is_named() {
        let rows = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(first_dependent_row(&rows), Some(1));
        let ok = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(first_dependent_row(&ok), None);
    }

    #[test]
    fn involutivity_lifted_sphere_is_integrable() {
        // x^2 + y^2 + z^2 = 1 lifted: two-dimensional integrable kernel.
        let h = HolonomicConstraints::new_analytic(
            3,
            1,
            Arc::new(|q: &DVector<f64>| {
                DVector::from_vec(vec![q.dot(q) - 1.0])
            }),
            Arc::new(|q: &DVector<f64>| {
                DMatrix::from_row_slice(1, 3, &[2.0 * q[0], 2.0 * q[1], 2.0 * q[2]])
            }),
            Arc::new(|_q| vec![DMatrix::identity(3, 3) * 2.0]),
        )
        .unwrap();
        let lifted = lift_holonomic_to_pfaffian(&h);
        let q = DVector::from_vec(vec![0.6, 0.48, 0.64]);
        let defect = involutivity_defect(&lifted, &q).unwrap();
        assert!(defect <= 1e-6, "defect = {defect}");
    }

    #[test]
    fn involutivity_knife_edge_is_nonholonomic() {
        let defect =
            involutivity_defect(&knife_edge(), &DVector::from_vec(vec![0.2, -0.7, 0.9])).unwrap();
        assert!(defect > 0.1, "defect = {defect}");
    }

    #[test]
    fn involutivity_contact_form_is_nonholonomic() {
        // dz - y dx in (x, y, z): omega = (-y, 0, 1)
        let p = PfaffianConstraints::from_coefficients(
            3,
            1,
            Arc::new(|q: &DVector<f64>| DMatrix::from_row_slice(1, 3, &[-q[1], 0.0, 1.0])),
        )
        .unwrap();
        let defect = involutivity_defect(&p, &DVector::zeros(3)).unwrap();
        assert!(defect > 0.1, "defect = {defect}");
    }

    #[test]
    fn involutivity_invariant_under_rescaling() {
        let base = knife_edge();
        let doubled = PfaffianConstraints::from_coefficients(
            3,
            1,
            Arc::new(|q: &DVector<f64>| {
                DMatrix::from_row_slice(1, 3, &[2.0 * q[2].sin(), -2.0 * q[2].cos(), 0.0])
            }),
        )
        .unwrap();
        let q = DVector::from_vec(vec![0.1, 0.4, 0.3]);
        let d1 = involutivity_defect(&base, &q).unwrap();
        let d2 = involutivity_defect(&doubled, &q).unwrap();
        assert!((d1 - d2).abs() <= 1e-6, "{d1} vs {d2}");
    }

    #[test]
    fn involutivity_rejects_inhomogeneous() {
        let p = PfaffianConstraints::from_coefficients(
            3,
            1,
            Arc::new(|_q: &DVector<f64>| DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])),
        )
        .unwrap()
        .with_inhomogeneous(
            Arc::new(|_q| DVector::from_vec(vec![1.0])),
            Arc::new(|_q| DMatrix::zeros(1, 3)),
        );
        assert!(matches!(
            involutivity_defect(&p, &DVector::zeros(3)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn counts_are_validated() {
        let bad = HolonomicConstraints::<f64>::from_residual(
            2,
            2,
            Arc::new(|q: &DVector<f64>| q.clone()),
        );
        assert!(bad.is_err());
    }
}
