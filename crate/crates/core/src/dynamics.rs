//! Lagrangian systems, dissipative forces, and the unconstrained equations
//! of motion.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd;
use crate::manifold::{MetricField, PointFn, Provenance};
use crate::scalar::Real;

/// Evaluator over phase-space points `(q, v)`.
pub type PhaseFn<T, Out> = Arc<dyn Fn(&DVector<T>, &DVector<T>) -> Out + Send + Sync>;

/// A Lagrangian `L(q, v)` with the partial derivatives the equations of
/// motion need. The mass matrix is the velocity Hessian of `L` and is
/// recomputed at every evaluation; nothing is cached.
#[derive(Clone)]
pub struct LagrangianSystem<T: Real> {
    dim: usize,
    lagrangian: PhaseFn<T, T>,
    dl_dq: PhaseFn<T, DVector<T>>,
    dl_dv: PhaseFn<T, DVector<T>>,
    /// `d²L/dv^i dv^j`.
    mass: PhaseFn<T, DMatrix<T>>,
    /// `d²L/dv^i dq^j`; rows index `v`, columns index `q`.
    dvq: PhaseFn<T, DMatrix<T>>,
    provenance: Provenance<T>,
}

impl<T: Real> LagrangianSystem<T> {
    pub fn new_analytic(
        dim: usize,
        lagrangian: PhaseFn<T, T>,
        dl_dq: PhaseFn<T, DVector<T>>,
        dl_dv: PhaseFn<T, DVector<T>>,
        mass: PhaseFn<T, DMatrix<T>>,
        dvq: PhaseFn<T, DMatrix<T>>,
    ) -> Self {
        Self {
            dim,
            lagrangian,
            dl_dq,
            dl_dv,
            mass,
            dvq,
            provenance: Provenance::Analytic,
        }
    }

    /// Build every partial from the Lagrangian alone by central finite
    /// differences: first derivatives at the default step, second
    /// derivatives by direct second differences at the wider step.
    pub fn from_lagrangian(dim: usize, lagrangian: PhaseFn<T, T>) -> Self {
        let h1 = fd::default_step::<T>();
        let h2 = fd::default_second_step::<T>();
        let l1 = lagrangian.clone();
        let dl_dq: PhaseFn<T, DVector<T>> = Arc::new(move |q, v| {
            fd::gradient(&|p: &DVector<T>| l1(p, v), q, h1)
        });
        let l2 = lagrangian.clone();
        let dl_dv: PhaseFn<T, DVector<T>> = Arc::new(move |q, v| {
            fd::gradient(&|w: &DVector<T>| l2(q, w), v, h1)
        });
        let l3 = lagrangian.clone();
        let mass: PhaseFn<T, DMatrix<T>> = Arc::new(move |q, v| {
            fd::hessian(&|w: &DVector<T>| l3(q, w), v, h2)
        });
        let l4 = lagrangian.clone();
        let dvq: PhaseFn<T, DMatrix<T>> = Arc::new(move |q, v| {
            fd::mixed_second(&|w: &DVector<T>, p: &DVector<T>| l4(p, w), v, q, h2)
        });
        Self {
            dim,
            lagrangian,
            dl_dq,
            dl_dv,
            mass,
            dvq,
            provenance: Provenance::FiniteDifference { step: h1 },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance<T> {
        self.provenance
    }

    pub fn lagrangian(&self, q: &DVector<T>, v: &DVector<T>) -> T {
        (self.lagrangian)(q, v)
    }

    pub fn dl_dq(&self, q: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        (self.dl_dq)(q, v)
    }

    pub fn dl_dv(&self, q: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        (self.dl_dv)(q, v)
    }

    pub fn mass_matrix(&self, q: &DVector<T>, v: &DVector<T>) -> DMatrix<T> {
        (self.mass)(q, v)
    }

    pub fn dvq(&self, q: &DVector<T>, v: &DVector<T>) -> DMatrix<T> {
        (self.dvq)(q, v)
    }

    /// Total energy `(dL/dv).v - L`.
    pub fn energy(&self, q: &DVector<T>, v: &DVector<T>) -> T {
        self.dl_dv(q, v).dot(v) - self.lagrangian(q, v)
    }
}

/// Covector potential `A_i(q)` with its coordinate derivatives
/// (`derivative` rows index `i`, columns the differentiation index).
#[derive(Clone)]
pub struct VectorPotential<T: Real> {
    pub value: PointFn<T, DVector<T>>,
    pub derivative: PointFn<T, DMatrix<T>>,
}

/// Scalar potential `V(q)` with gradient.
#[derive(Clone)]
pub struct ScalarPotential<T: Real> {
    pub value: PointFn<T, T>,
    pub gradient: PointFn<T, DVector<T>>,
}

impl<T: Real> ScalarPotential<T> {
    /// Potential from a black-box evaluator, gradient by finite differences.
    pub fn from_value(value: PointFn<T, T>) -> Self {
        let v = value.clone();
        let gradient: PointFn<T, DVector<T>> = Arc::new(move |q: &DVector<T>| {
            fd::gradient(&|p: &DVector<T>| v(p), q, fd::default_step())
        });
        Self { value, gradient }
    }
}

/// Data of a natural system: metric kinetic term, optional covector
/// potential with coupling, optional scalar potential.
#[derive(Clone)]
pub struct NaturalSystemSpec<T: Real> {
    pub metric: MetricField<T>,
    pub vector_potential: Option<VectorPotential<T>>,
    pub scalar_potential: Option<ScalarPotential<T>>,
    pub coupling: T,
}

impl<T: Real> NaturalSystemSpec<T> {
    pub fn kinetic_only(metric: MetricField<T>) -> Self {
        Self {
            metric,
            vector_potential: None,
            scalar_potential: None,
            coupling: T::zero(),
        }
    }
}

/// `L = 1/2 G_ij v^i v^j + eps A_i v^i - V`, with analytic partials
/// assembled from the parts. The scalar potential enters with a minus
/// sign (the `L = T - V` convention).
pub fn build_natural_lagrangian<T: Real>(spec: &NaturalSystemSpec<T>) -> LagrangianSystem<T> {
    let dim = spec.metric.dim();
    let metric = spec.metric.clone();
    let vector = spec.vector_potential.clone();
    let scalar = spec.scalar_potential.clone();
    let eps = spec.coupling;

    let m1 = metric.clone();
    let v1 = vector.clone();
    let s1 = scalar.clone();
    let lagrangian: PhaseFn<T, T> = Arc::new(move |q, v| {
        let g = m1.value(q).expect("metric must be evaluable along trajectories");
        let mut l = (v.transpose() * &g * v)[(0, 0)] * T::of(0.5);
        if let Some(a) = &v1 {
            l += (a.value)(q).dot(v) * eps;
        }
        if let Some(pot) = &s1 {
            l -= (pot.value)(q);
        }
        l
    });

    let m2 = metric.clone();
    let v2 = vector.clone();
    let s2 = scalar.clone();
    let dl_dq: PhaseFn<T, DVector<T>> = Arc::new(move |q, v| {
        let dg = m2.derivative(q);
        let mut out = DVector::zeros(dg.len());
        for (j, dgj) in dg.iter().enumerate() {
            out[j] = (v.transpose() * dgj * v)[(0, 0)] * T::of(0.5);
        }
        if let Some(a) = &v2 {
            // d(A_i v^i)/dq^j = A_{i,j} v^i
            out += (a.derivative)(q).transpose() * v * eps;
        }
        if let Some(pot) = &s2 {
            out -= (pot.gradient)(q);
        }
        out
    });

    let m3 = metric.clone();
    let v3 = vector.clone();
    let dl_dv: PhaseFn<T, DVector<T>> = Arc::new(move |q, v| {
        let g = m3.value(q).expect("metric must be evaluable along trajectories");
        let mut out = &g * v;
        if let Some(a) = &v3 {
            out += (a.value)(q) * eps;
        }
        out
    });

    let m4 = metric.clone();
    let mass: PhaseFn<T, DMatrix<T>> = Arc::new(move |q, _v| {
        m4.value(q).expect("metric must be evaluable along trajectories")
    });

    let m5 = metric;
    let v5 = vector;
    let dvq: PhaseFn<T, DMatrix<T>> = Arc::new(move |q, v| {
        let dg = m5.derivative(q);
        let k = dg.len();
        let mut out = DMatrix::zeros(k, k);
        for (j, dgj) in dg.iter().enumerate() {
            out.set_column(j, &(dgj * v));
        }
        if let Some(a) = &v5 {
            out += (a.derivative)(q) * eps;
        }
        out
    });

    LagrangianSystem::new_analytic(dim, lagrangian, dl_dq, dl_dv, mass, dvq)
}

/// Magnetic-type two-form `F_kj = A_{j,k} - A_{k,j}` of the covector
/// potential.
pub fn lorentz_two_form<T: Real>(
    spec: &NaturalSystemSpec<T>,
    q: &DVector<T>,
) -> Result<DMatrix<T>> {
    let a = spec.vector_potential.as_ref().ok_or_else(|| {
        Error::Configuration("no covector potential supplied".into())
    })?;
    let da = (a.derivative)(q);
    Ok(da.transpose() - da)
}

/// Generalized non-Lagrangian force covector, e.g. friction.
#[derive(Clone)]
pub struct DissipativeForce<T: Real> {
    eval: PhaseFn<T, DVector<T>>,
    viscous: Option<PhaseFn<T, DMatrix<T>>>,
}

impl<T: Real> DissipativeForce<T> {
    pub fn zero(dim: usize) -> Self {
        Self {
            eval: Arc::new(move |_q, _v| DVector::zeros(dim)),
            viscous: None,
        }
    }

    /// Arbitrary covector force law.
    pub fn from_covector(eval: PhaseFn<T, DVector<T>>) -> Self {
        Self { eval, viscous: None }
    }

    /// Linear-viscous law `D = -d(q, v) v`. The coefficient matrix must be
    /// symmetric positive definite; checked here for constant matrices and
    /// lazily on evaluation otherwise.
    pub fn linear_viscous(coeff: PhaseFn<T, DMatrix<T>>) -> Self {
        let c = coeff.clone();
        Self {
            eval: Arc::new(move |q, v| -(c(q, v) * v)),
            viscous: Some(coeff),
        }
    }

    pub fn linear_viscous_constant(d: DMatrix<T>) -> Result<Self> {
        let scale = T::one().max(d.amax());
        if (&d - d.transpose()).amax() > T::of(1e-12) * scale {
            return Err(Error::Configuration(
                "viscous coefficient matrix must be symmetric".into(),
            ));
        }
        if d.clone().cholesky().is_none() {
            return Err(Error::Configuration(
                "viscous coefficient matrix must be positive definite".into(),
            ));
        }
        Ok(Self::linear_viscous(Arc::new(move |_q, _v| d.clone())))
    }

    pub fn value(&self, q: &DVector<T>, v: &DVector<T>) -> DVector<T> {
        (self.eval)(q, v)
    }

    pub fn viscous_coefficient(&self, q: &DVector<T>, v: &DVector<T>) -> Option<DMatrix<T>> {
        self.viscous.as_ref().map(|c| c(q, v))
    }
}

/// Right side of `M a = Q`: the applied generalized force
/// `Q_i = dL/dq^i - (d²L/dv^i dq^j) v^j + D_i`.
pub fn applied_force<T: Real>(
    sys: &LagrangianSystem<T>,
    dissipation: &DissipativeForce<T>,
    q: &DVector<T>,
    v: &DVector<T>,
) -> DVector<T> {
    sys.dl_dq(q, v) - sys.dvq(q, v) * v + dissipation.value(q, v)
}

/// Coordinate acceleration of the unconstrained system `(L, D)`.
pub fn unconstrained_accel<T: Real>(
    sys: &LagrangianSystem<T>,
    dissipation: &DissipativeForce<T>,
    q: &DVector<T>,
    v: &DVector<T>,
) -> Result<DVector<T>> {
    let mass = sys.mass_matrix(q, v);
    let rhs = applied_force(sys, dissipation, q, v);
    mass.lu().solve(&rhs).ok_or_else(|| Error::Dynamics {
        message: "singular mass matrix".into(),
        point: q.iter().map(|x| x.as_f64()).collect(),
    })
}

/// Euler-Lagrange residual `E_i = (D/Dt) dL/dv^i - dL/dq^i - D_i` with the
/// time derivative expanded along the supplied `(q, v, a)`.
pub fn euler_lagrange_residual<T: Real>(
    sys: &LagrangianSystem<T>,
    dissipation: &DissipativeForce<T>,
    q: &DVector<T>,
    v: &DVector<T>,
    a: &DVector<T>,
) -> DVector<T> {
    sys.dvq(q, v) * v + sys.mass_matrix(q, v) * a - sys.dl_dq(q, v) - dissipation.value(q, v)
}
