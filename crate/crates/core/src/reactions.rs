//! The three reaction-force laws and the reaction power functional. Pure
//! formulas over immutable constraint sets; multipliers come from the
//! solver.

use nalgebra::{DMatrix, DVector};

use crate::constraints::{ConstraintSet, PfaffianConstraints, VelocityConstraints};
use crate::scalar::Real;

/// Which constitutive law closes the reaction forces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReactionModel {
    /// Passive reactions orthogonal to the virtual velocities; holonomic and
    /// Pfaffian sets only.
    IdealDalembert,
    /// Reactions along the velocity gradient of the constraint.
    AppellChetaev,
    /// Variational (programme-motion) reactions with differential
    /// multipliers.
    Vakonomic,
}

impl ReactionModel {
    pub fn name(&self) -> &'static str {
        match self {
            Self::IdealDalembert => "ideal",
            Self::AppellChetaev => "appell_chetaev",
            Self::Vakonomic => "vakonomic",
        }
    }

    /// Whether the model is defined for a constraint family.
    pub fn accepts<T: Real>(&self, set: &ConstraintSet<T>) -> bool {
        match self {
            Self::IdealDalembert => {
                matches!(set, ConstraintSet::Holonomic(_) | ConstraintSet::Pfaffian(_))
            }
            // Velocity-nonlinear natively; the linear families by lifting.
            Self::AppellChetaev | Self::Vakonomic => true,
        }
    }
}

/// Multiplier values attached to one constraint set; vakonomic sets also
/// carry the rates.
#[derive(Debug, Clone)]
pub struct MultiplierState<T: Real> {
    pub values: DVector<T>,
    pub rates: Option<DVector<T>>,
}

impl<T: Real> MultiplierState<T> {
    pub fn algebraic(values: DVector<T>) -> Self {
        Self { values, rates: None }
    }

    pub fn differential(values: DVector<T>, rates: DVector<T>) -> Self {
        Self {
            values,
            rates: Some(rates),
        }
    }
}

/// Ideal d'Alembert reaction of a Pfaffian set: `R_i = lambda^a omega_ai`.
/// Holonomic sets use their lifted coefficients `dF_a/dq^i`.
pub fn ideal_reaction_pfaffian<T: Real>(
    constraints: &PfaffianConstraints<T>,
    q: &DVector<T>,
    lambda: &DVector<T>,
) -> DVector<T> {
    constraints.coefficients(q).transpose() * lambda
}

/// Ideal reaction from an explicit coefficient matrix (rows are
/// constraints).
pub fn ideal_reaction_rows<T: Real>(rows: &DMatrix<T>, lambda: &DVector<T>) -> DVector<T> {
    rows.transpose() * lambda
}

/// Appell-Chetaev reaction `R_i = lambda^a dF_a/dv^i`.
pub fn appell_chetaev_reaction<T: Real>(
    constraints: &VelocityConstraints<T>,
    q: &DVector<T>,
    v: &DVector<T>,
    lambda: &DVector<T>,
) -> DVector<T> {
    constraints.df_dv(q, v).transpose() * lambda
}

/// Vakonomic reaction
/// `R_i = mu^a dF_a/dq^i - mudot^a dF_a/dv^i
///        - mu^a d²F_a/dv^i dq^j v^j - mu^a d²F_a/dv^i dv^j a^j`.
pub fn vakonomic_reaction<T: Real>(
    constraints: &VelocityConstraints<T>,
    q: &DVector<T>,
    v: &DVector<T>,
    a: &DVector<T>,
    mu: &DVector<T>,
    mu_dot: &DVector<T>,
) -> DVector<T> {
    let mut r = constraints.df_dq(q, v).transpose() * mu;
    r -= constraints.df_dv(q, v).transpose() * mu_dot;
    let dvdq = constraints.d2f_dvdq(q, v);
    let dvdv = constraints.d2f_dvdv(q, v);
    for (idx, m) in mu.iter().enumerate() {
        r -= (&dvdq[idx] * v) * *m;
        r -= (&dvdv[idx] * a) * *m;
    }
    r
}

/// Pfaffian specialization of the vakonomic law:
/// `R_i = mu^a (omega_{aj,i} - omega_{ai,j}) v^j - mudot^a omega_ai`.
pub fn vakonomic_reaction_pfaffian<T: Real>(
    constraints: &PfaffianConstraints<T>,
    q: &DVector<T>,
    v: &DVector<T>,
    mu: &DVector<T>,
    mu_dot: &DVector<T>,
) -> DVector<T> {
    let k = constraints.dim();
    let domega = constraints.coefficient_derivatives(q);
    let mut r = -(constraints.coefficients(q).transpose() * mu_dot);
    for (a, da) in domega.iter().enumerate() {
        for i in 0..k {
            let mut acc = T::zero();
            for j in 0..k {
                acc += (da[(j, i)] - da[(i, j)]) * v[j];
            }
            r[i] += mu[a] * acc;
        }
    }
    r
}

/// Mechanical power `R_i v^i` of a reaction covector.
pub fn reaction_power<T: Real>(reaction: &DVector<T>, v: &DVector<T>) -> T {
    reaction.dot(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{
        lift_holonomic_to_pfaffian, lift_pfaffian_to_velocity, HolonomicConstraints,
    };
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn circle() -> HolonomicConstraints<f64> {
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

    #[test]
    fn static_pendulum_reaction() {
        // Static equilibrium at the bottom point: M a = -grad V + lambda dF/dq
        // with a = 0 forces lambda = -g/2, hence R = (0, g).
        let g = 9.81;
        let lifted = lift_holonomic_to_pfaffian(&circle());
        let q = DVector::from_vec(vec![0.0, -1.0]);
        let grad_v = DVector::from_vec(vec![0.0, g]);
        // solve 0 = -grad_v + jac^T lambda for the single multiplier
        let jac = lifted.coefficients(&q);
        let lambda = DVector::from_vec(vec![grad_v[1] / jac[(0, 1)]]);
        assert_relative_eq!(lambda[0], -g / 2.0, epsilon = 1e-12);
        let r = ideal_reaction_pfaffian(&lifted, &q, &lambda);
        assert_relative_eq!(r[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(r[1], g, epsilon = 1e-12);
    }

    #[test]
    fn zero_multiplier_zero_reaction() {
        let lifted = lift_holonomic_to_pfaffian(&circle());
        let r = ideal_reaction_pfaffian(
            &lifted,
            &DVector::from_vec(vec![0.6, 0.8]),
            &DVector::zeros(1),
        );
        assert!(r.amax() == 0.0);
    }

    #[test]
    fn stacked_reactions_add() {
        let rows = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
        let l = DVector::from_vec(vec![0.7, -0.4]);
        let sum = ideal_reaction_rows(&rows, &l);
        let first = ideal_reaction_rows(&DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 2.0]), &DVector::from_vec(vec![0.7]));
        let second = ideal_reaction_rows(&DMatrix::from_row_slice(1, 3, &[0.0, 1.0, -1.0]), &DVector::from_vec(vec![-0.4]));
        assert!((sum - (first + second)).amax() < 1e-15);
    }

    #[test]
    fn appell_chetaev_on_lifted_pfaffian_matches_ideal() {
        let lifted = lift_holonomic_to_pfaffian(&circle());
        let vel = lift_pfaffian_to_velocity(&lifted);
        let q = DVector::from_vec(vec![0.6, 0.8]);
        let v = DVector::from_vec(vec![-0.8, 0.6]);
        let lambda = DVector::from_vec(vec![1.3]);
        let r_ac = appell_chetaev_reaction(&vel, &q, &v, &lambda);
        let r_id = ideal_reaction_pfaffian(&lifted, &q, &lambda);
        assert!((r_ac - r_id).amax() < 1e-14);
    }

    #[test]
    fn speed_stabilization_gradient() {
        // F = (v.v - c^2) / 2, lambda = 1 -> R = v
        let vel = VelocityConstraints::new_analytic(
            3,
            1,
            Arc::new(|_q: &DVector<f64>, v: &DVector<f64>| {
                DVector::from_vec(vec![(v.dot(v) - 4.0) / 2.0])
            }),
            Arc::new(|_q, _v| DMatrix::zeros(1, 3)),
            Arc::new(|_q, v: &DVector<f64>| {
                DMatrix::from_row_slice(1, 3, &[v[0], v[1], v[2]])
            }),
            Arc::new(|_q, _v| vec![DMatrix::zeros(3, 3)]),
            Arc::new(|_q, _v| vec![DMatrix::identity(3, 3)]),
        )
        .unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let r = appell_chetaev_reaction(&vel, &DVector::zeros(3), &v, &DVector::from_vec(vec![1.0]));
        assert!((r - v).amax() < 1e-14);
    }

    #[test]
    fn vakonomic_single_rate_term() {
        let lifted = lift_holonomic_to_pfaffian(&circle());
        let vel = lift_pfaffian_to_velocity(&lifted);
        let q = DVector::from_vec(vec![0.6, 0.8]);
        let v = DVector::from_vec(vec![-0.8, 0.6]);
        let a = DVector::from_vec(vec![0.2, 0.1]);
        let r = vakonomic_reaction(
            &vel,
            &q,
            &v,
            &a,
            &DVector::zeros(1),
            &DVector::from_vec(vec![1.0]),
        );
        let expected = -vel.df_dv(&q, &v).transpose() * DVector::from_vec(vec![1.0]);
        assert!((r - expected).amax() < 1e-14);
    }

    #[test]
    fn vakonomic_constant_coefficients_constant_mu_is_zero() {
        let p = PfaffianConstraints::homogeneous(
            3,
            1,
            Arc::new(|_q: &DVector<f64>| DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0])),
            Arc::new(|_q| vec![DMatrix::zeros(3, 3)]),
        )
        .unwrap();
        let vel = lift_pfaffian_to_velocity(&p);
        let r = vakonomic_reaction(
            &vel,
            &DVector::zeros(3),
            &DVector::from_vec(vec![2.0, -1.0, 0.0]),
            &DVector::from_vec(vec![1.0, 1.0, 1.0]),
            &DVector::from_vec(vec![0.9]),
            &DVector::zeros(1),
        );
        assert!(r.amax() < 1e-14);
    }

    #[test]
    fn vakonomic_matches_pfaffian_specialization() {
        // Audited identity: the general law reduces exactly to the Pfaffian
        // formula on lifted homogeneous constraints.
        let p = PfaffianConstraints::homogeneous(
            3,
            1,
            Arc::new(|q: &DVector<f64>| {
                DMatrix::from_row_slice(1, 3, &[q[2].sin(), -q[2].cos(), 0.3 * q[0]])
            }),
            Arc::new(|q: &DVector<f64>| {
                let mut d = DMatrix::zeros(3, 3);
                d[(0, 2)] = q[2].cos();
                d[(1, 2)] = q[2].sin();
                d[(2, 0)] = 0.3;
                vec![d]
            }),
        )
        .unwrap();
        let vel = lift_pfaffian_to_velocity(&p);
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..200 {
            let q = DVector::from_vec(vec![next(), next(), next()]);
            let v = DVector::from_vec(vec![next(), next(), next()]);
            let a = DVector::from_vec(vec![next(), next(), next()]);
            let mu = DVector::from_vec(vec![next()]);
            let mu_dot = DVector::from_vec(vec![next()]);
            let general = vakonomic_reaction(&vel, &q, &v, &a, &mu, &mu_dot);
            let special = vakonomic_reaction_pfaffian(&p, &q, &v, &mu, &mu_dot);
            assert!((general - special).amax() <= 1e-12);
        }
    }

    #[test]
    fn reactions_annihilate_kernel_velocities() {
        let lifted = lift_holonomic_to_pfaffian(&circle());
        let q = DVector::from_vec(vec![0.6, 0.8]);
        // kernel of (1.2, 1.6): direction (-1.6, 1.2)
        let v = DVector::from_vec(vec![-1.6, 1.2]);
        let r = ideal_reaction_pfaffian(&lifted, &q, &DVector::from_vec(vec![2.4]));
        let p = reaction_power(&r, &v);
        assert!(p.abs() <= 1e-12 * r.norm() * v.norm());
    }

    #[test]
    fn power_values() {
        assert_relative_eq!(
            reaction_power(
                &DVector::from_vec(vec![0.0, 1.0]),
                &DVector::from_vec(vec![1.0, 0.0])
            ),
            0.0
        );
        assert_relative_eq!(
            reaction_power(
                &DVector::from_vec(vec![1.0, 1.0]),
                &DVector::from_vec(vec![1.0, 1.0])
            ),
            2.0
        );
    }

    #[test]
    fn laws_are_linear_in_multipliers() {
        let lifted = lift_holonomic_to_pfaffian(&circle());
        let vel = lift_pfaffian_to_velocity(&lifted);
        let q = DVector::from_vec(vec![0.28, 0.96]);
        let v = DVector::from_vec(vec![0.5, 0.5]);
        let a = DVector::from_vec(vec![-0.3, 0.2]);
        let mu = DVector::from_vec(vec![0.77]);
        let mu_dot = DVector::from_vec(vec![-0.12]);
        let c = 3.5;
        let r1 = vakonomic_reaction(&vel, &q, &v, &a, &mu, &mu_dot);
        let r2 = vakonomic_reaction(&vel, &q, &v, &a, &(&mu * c), &(&mu_dot * c));
        assert!((&r1 * c - r2).amax() < 1e-12);

        let l = DVector::from_vec(vec![0.4]);
        let i1 = ideal_reaction_pfaffian(&lifted, &q, &l);
        let i2 = ideal_reaction_pfaffian(&lifted, &q, &(&l * c));
        assert!((&i1 * c - i2).amax() < 1e-14);
    }

    #[test]
    fn ideal_model_rejects_velocity_family() {
        let vel = VelocityConstraints::<f64>::from_residual(
            2,
            1,
            Arc::new(|_q, v: &DVector<f64>| DVector::from_vec(vec![v[0] * v[0] - 1.0])),
        )
        .unwrap();
        let set = ConstraintSet::Velocity(vel);
        assert!(!ReactionModel::IdealDalembert.accepts(&set));
        assert!(ReactionModel::AppellChetaev.accepts(&set));
        assert!(ReactionModel::Vakonomic.accepts(&set));
    }
}
