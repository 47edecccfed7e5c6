//! Bridge from the affine body to the generic solver: flattens the body
//! into `k = n + n²` coordinates with the constant kinetic metric and the
//! variant's constraints expressed as holonomic or Pfaffian sets. Used to
//! cross-validate the structured affine path against the multiplier path.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{
    applied_forces, flatten, internal_metric, skew_pairs, sym_pairs, unflatten, vec_index,
    AffineBodyModel, AffineBodyState, ConstraintVariant, ForceLaw,
};
use crate::constraints::{ConstraintSet, HolonomicConstraints, PfaffianConstraints};
use crate::dynamics::{DissipativeForce, LagrangianSystem, PhaseFn};
use crate::error::{Error, Result};
use crate::manifold::{MetricField, PointFn};
use crate::reactions::ReactionModel;
use crate::scalar::Real;
use crate::solver::{ConstraintBlock, IntegratorConfig, Scenario};

/// Pack `(r, phi)` into the generic configuration vector.
pub fn state_to_q<T: Real>(state: &AffineBodyState<T>) -> DVector<T> {
    let n = state.dim();
    let mut q = DVector::zeros(n + n * n);
    q.rows_mut(0, n).copy_from(&state.r);
    q.rows_mut(n, n * n).copy_from(&flatten(&state.phi));
    q
}

/// Pack `(rdot, phidot)` into the generic velocity vector.
pub fn state_to_v<T: Real>(state: &AffineBodyState<T>) -> DVector<T> {
    let n = state.dim();
    let mut v = DVector::zeros(n + n * n);
    v.rows_mut(0, n).copy_from(&state.rdot);
    v.rows_mut(n, n * n).copy_from(&flatten(&state.phidot));
    v
}

/// Unpack a generic phase point back into an affine state.
pub fn q_to_state<T: Real>(n: usize, q: &DVector<T>, v: &DVector<T>) -> AffineBodyState<T> {
    AffineBodyState {
        r: DVector::from(q.rows(0, n)),
        rdot: DVector::from(v.rows(0, n)),
        phi: unflatten(&DVector::from(q.rows(n, n * n)), n, n),
        phidot: unflatten(&DVector::from(v.rows(n, n * n)), n, n),
    }
}

/// Recover the reaction moment from the internal part of a generic
/// reaction covector: the covector satisfies `R_mat = g N_R^T phi^{-T}`.
pub fn moment_from_generalized<T: Real>(
    model: &AffineBodyModel<T>,
    phi: &DMatrix<T>,
    reaction: &DVector<T>,
) -> Result<DMatrix<T>> {
    let n = model.spatial_dim;
    if reaction.len() != n + n * n {
        return Err(Error::Configuration(format!(
            "reaction covector has length {}, expected {}",
            reaction.len(),
            n + n * n
        )));
    }
    let r_mat = unflatten(&DVector::from(reaction.rows(n, n * n)), n, n);
    let ginv = model.spatial_metric_inverse();
    Ok(phi * r_mat.transpose() * ginv)
}

fn generic_lagrangian<T: Real>(model: &AffineBodyModel<T>) -> LagrangianSystem<T> {
    let n = model.spatial_dim;
    let k = n + n * n;
    let mut g_big = DMatrix::zeros(k, k);
    g_big
        .view_mut((0, 0), (n, n))
        .copy_from(&(&model.spatial_metric * model.mass));
    g_big
        .view_mut((n, n), (n * n, n * n))
        .copy_from(&internal_metric(&model.spatial_metric, &model.inertia));
    let metric = MetricField::constant(g_big.clone());

    match &model.force {
        ForceLaw::Potential {
            value,
            grad_r,
            grad_phi,
        } => {
            let value = value.clone();
            let grad_r = grad_r.clone();
            let grad_phi = grad_phi.clone();
            let v2 = value.clone();
            let lagrangian: PhaseFn<T, T> = Arc::new(move |q, v| {
                let kin = (v.transpose() * &g_big * v)[(0, 0)] * T::of(0.5);
                let r = DVector::from(q.rows(0, n));
                let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
                kin - v2(&r, &phi)
            });
            let gr = grad_r.clone();
            let gp = grad_phi.clone();
            let grad: PointFn<T, DVector<T>> = Arc::new(move |q| {
                let r = DVector::from(q.rows(0, n));
                let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
                let mut out = DVector::zeros(n + n * n);
                out.rows_mut(0, n).copy_from(&gr(&r, &phi));
                out.rows_mut(n, n * n).copy_from(&flatten(&gp(&r, &phi)));
                out
            });
            let metric2 = metric.clone();
            let grad2 = grad.clone();
            let dl_dq: PhaseFn<T, DVector<T>> = Arc::new(move |q, _v| -grad2(q));
            let metric3 = metric2.clone();
            let dl_dv: PhaseFn<T, DVector<T>> = Arc::new(move |q, v| {
                metric3.value(q).expect("constant metric") * v
            });
            let metric4 = metric2.clone();
            let mass: PhaseFn<T, DMatrix<T>> =
                Arc::new(move |q, _v| metric4.value(q).expect("constant metric"));
            let dvq: PhaseFn<T, DMatrix<T>> = Arc::new(move |_q, _v| DMatrix::zeros(k, k));
            LagrangianSystem::new_analytic(k, lagrangian, dl_dq, dl_dv, mass, dvq)
        }
        _ => {
            let lagrangian: PhaseFn<T, T> = Arc::new(move |_q, v| {
                (v.transpose() * &g_big * v)[(0, 0)] * T::of(0.5)
            });
            let spec = crate::dynamics::NaturalSystemSpec::kinetic_only(metric);
            let sys = crate::dynamics::build_natural_lagrangian(&spec);
            let _ = lagrangian;
            sys
        }
    }
}

/// Applied non-potential forces as a generalized covector over the flat
/// coordinates: `[g F ; vec(g N^T phi^{-T})]`.
fn generic_direct_force<T: Real>(model: &AffineBodyModel<T>) -> DissipativeForce<T> {
    let n = model.spatial_dim;
    match &model.force {
        ForceLaw::Direct { .. } => {
            let model = model.clone();
            DissipativeForce::from_covector(Arc::new(move |q: &DVector<T>, v: &DVector<T>| {
                let state = q_to_state(n, q, v);
                let (f, moment) = applied_forces(&model, &state)
                    .expect("direct force law evaluates everywhere");
                let g = &model.spatial_metric;
                let phi_inv = state
                    .phi
                    .clone()
                    .try_inverse()
                    .expect("nonsingular configuration along trajectories");
                let q_int = g * moment.transpose() * phi_inv.transpose();
                let mut out = DVector::zeros(n + n * n);
                out.rows_mut(0, n).copy_from(&(g * f));
                out.rows_mut(n, n * n).copy_from(&flatten(&q_int));
                out
            }))
        }
        _ => DissipativeForce::zero(n + n * n),
    }
}

fn rigid_constraints<T: Real>(model: &AffineBodyModel<T>) -> Result<HolonomicConstraints<T>> {
    let n = model.spatial_dim;
    let k = n + n * n;
    let pairs = sym_pairs(n);
    let m = pairs.len();
    let g = model.spatial_metric.clone();
    let eta = model.material_metric.clone();

    let g1 = g.clone();
    let eta1 = eta.clone();
    let pairs1 = pairs.clone();
    let residual: PointFn<T, DVector<T>> = Arc::new(move |q| {
        let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
        let c = phi.transpose() * &g1 * phi - &eta1;
        DVector::from_iterator(m, pairs1.iter().map(|&(a, b)| c[(a, b)]))
    });

    let g2 = g.clone();
    let pairs2 = pairs.clone();
    let jacobian: PointFn<T, DMatrix<T>> = Arc::new(move |q| {
        let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
        let g_phi = &g2 * phi;
        let mut jac = DMatrix::zeros(m, k);
        for (row, (a, b)) in pairs2.iter().enumerate() {
            for kk in 0..n {
                jac[(row, n + vec_index(n, kk, *b))] += g_phi[(kk, *a)];
                jac[(row, n + vec_index(n, kk, *a))] += g_phi[(kk, *b)];
            }
        }
        jac
    });

    let g3 = g.clone();
    let pairs3 = pairs;
    let hessian: PointFn<T, Vec<DMatrix<T>>> = Arc::new(move |_q| {
        pairs3
            .iter()
            .map(|&(a, b)| {
                let mut h = DMatrix::zeros(k, k);
                for kk in 0..n {
                    for ll in 0..n {
                        let g_kl = g3[(kk, ll)];
                        h[(n + vec_index(n, kk, a), n + vec_index(n, ll, b))] += g_kl;
                        h[(n + vec_index(n, kk, b), n + vec_index(n, ll, a))] += g_kl;
                    }
                }
                h
            })
            .collect()
    });

    HolonomicConstraints::new_analytic(k, m, residual, jacobian, hessian)
}

fn isochoric_constraint<T: Real>(
    model: &AffineBodyModel<T>,
    det_ref: T,
) -> Result<HolonomicConstraints<T>> {
    let n = model.spatial_dim;
    let k = n + n * n;

    let residual: PointFn<T, DVector<T>> = Arc::new(move |q| {
        let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
        DVector::from_element(1, phi.determinant() - det_ref)
    });

    let jacobian: PointFn<T, DMatrix<T>> = Arc::new(move |q| {
        let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
        let det = phi.determinant();
        let phi_inv = phi.try_inverse().expect("nonsingular configuration");
        let mut jac = DMatrix::zeros(1, k);
        for kk in 0..n {
            for c in 0..n {
                jac[(0, n + vec_index(n, kk, c))] = det * phi_inv[(c, kk)];
            }
        }
        jac
    });

    let hessian: PointFn<T, Vec<DMatrix<T>>> = Arc::new(move |q| {
        let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
        let det = phi.determinant();
        let phi_inv = phi.try_inverse().expect("nonsingular configuration");
        let mut h = DMatrix::zeros(k, k);
        for kk in 0..n {
            for c in 0..n {
                for ll in 0..n {
                    for d in 0..n {
                        h[(n + vec_index(n, kk, c), n + vec_index(n, ll, d))] = det
                            * (phi_inv[(c, kk)] * phi_inv[(d, ll)]
                                - phi_inv[(c, ll)] * phi_inv[(d, kk)]);
                    }
                }
            }
        }
        vec![h]
    });

    HolonomicConstraints::new_analytic(k, 1, residual, jacobian, hessian)
}

fn conformal_constraints<T: Real>(model: &AffineBodyModel<T>) -> Result<HolonomicConstraints<T>> {
    let n = model.spatial_dim;
    let k = n + n * n;
    let pairs: Vec<(usize, usize)> = sym_pairs(n)
        .into_iter()
        .filter(|&(a, b)| !(a == n - 1 && b == n - 1))
        .collect();
    let m = pairs.len();
    let g = model.spatial_metric.clone();
    let det_eta = model.material_metric.determinant();
    let eta_hat =
        &model.material_metric / det_eta.powf(T::one() / T::of(n as f64));

    let g1 = g.clone();
    let eta_hat1 = eta_hat.clone();
    let pairs1 = pairs.clone();
    let residual: PointFn<T, DVector<T>> = Arc::new(move |q| {
        let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
        let x = phi.transpose() * &g1 * phi;
        let scale = x.determinant().powf(-T::one() / T::of(n as f64));
        let c_hat = &x * scale - &eta_hat1;
        DVector::from_iterator(m, pairs1.iter().map(|&(a, b)| c_hat[(a, b)]))
    });

    let g2 = g;
    let pairs2 = pairs;
    let jacobian: PointFn<T, DMatrix<T>> = Arc::new(move |q| {
        let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
        let x = phi.transpose() * &g2 * &phi;
        let scale = x.determinant().powf(-T::one() / T::of(n as f64));
        let x_inv = x.clone().try_inverse().expect("full-rank configuration");
        let g_phi = &g2 * phi;
        let frac = T::one() / T::of(n as f64);
        let mut jac = DMatrix::zeros(m, k);
        for (row, (a, b)) in pairs2.iter().enumerate() {
            for kk in 0..n {
                for cc in 0..n {
                    let mut dx_ab = T::zero();
                    if cc == *a {
                        dx_ab += g_phi[(kk, *b)];
                    }
                    if cc == *b {
                        dx_ab += g_phi[(kk, *a)];
                    }
                    let mut tr_term = T::zero();
                    for aa in 0..n {
                        tr_term += x_inv[(aa, cc)] * g_phi[(kk, aa)];
                    }
                    tr_term *= T::of(2.0);
                    jac[(row, n + vec_index(n, kk, cc))] +=
                        scale * (dx_ab - x[(*a, *b)] * frac * tr_term);
                }
            }
        }
        jac
    });

    let residual2 = residual.clone();
    HolonomicConstraints::from_jacobian(k, m, residual2, jacobian)
}

fn rotation_free_constraints<T: Real>(
    model: &AffineBodyModel<T>,
) -> Result<PfaffianConstraints<T>> {
    let n = model.spatial_dim;
    let k = n + n * n;
    let pairs = skew_pairs(n);
    let m = pairs.len();
    let g = model.spatial_metric.clone();

    let coefficients: PointFn<T, DMatrix<T>> = Arc::new(move |q| {
        let phi = unflatten(&DVector::from(q.rows(n, n * n)), n, n);
        let phi_inv = phi.try_inverse().expect("nonsingular configuration");
        let mut om = DMatrix::zeros(m, k);
        for (row, (i, j)) in pairs.iter().enumerate() {
            for kk in 0..n {
                for c in 0..n {
                    om[(row, n + vec_index(n, kk, c))] =
                        g[(*i, kk)] * phi_inv[(c, *j)] - g[(*j, kk)] * phi_inv[(c, *i)];
                }
            }
        }
        om
    });

    PfaffianConstraints::from_coefficients(k, m, coefficients)
}

/// Express the affine body with a constraint variant as a generic scenario
/// over the flat `n + n²` chart, with ideal d'Alembert reactions.
pub fn to_generic_scenario<T: Real>(
    model: &AffineBodyModel<T>,
    variant: ConstraintVariant,
    state0: &AffineBodyState<T>,
    t_end: T,
    config: IntegratorConfig<T>,
) -> Result<Scenario<T>> {
    model.validate()?;
    let system = generic_lagrangian(model);
    let dissipation = generic_direct_force(model);
    let blocks = match variant {
        ConstraintVariant::Unconstrained => Vec::new(),
        ConstraintVariant::Rigid => vec![ConstraintBlock::new(
            ConstraintSet::Holonomic(rigid_constraints(model)?),
            ReactionModel::IdealDalembert,
        )],
        ConstraintVariant::Isochoric => vec![ConstraintBlock::new(
            ConstraintSet::Holonomic(isochoric_constraint(model, state0.phi.determinant())?),
            ReactionModel::IdealDalembert,
        )],
        ConstraintVariant::Conformal => vec![ConstraintBlock::new(
            ConstraintSet::Holonomic(conformal_constraints(model)?),
            ReactionModel::IdealDalembert,
        )],
        ConstraintVariant::RotationFree => vec![ConstraintBlock::new(
            ConstraintSet::Pfaffian(rotation_free_constraints(model)?),
            ReactionModel::IdealDalembert,
        )],
    };
    Ok(Scenario {
        system,
        dissipation,
        blocks,
        q0: state_to_q(state0),
        v0: state_to_v(state0),
        t_end,
        config,
        sample_stride: 1,
    })
}
