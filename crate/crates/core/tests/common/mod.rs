//! Shared scenario builders for the integration tests.

use std::sync::Arc;

use liaison_core::constraints::{ConstraintSet, HolonomicConstraints, PfaffianConstraints};
use liaison_core::dynamics::{
    build_natural_lagrangian, DissipativeForce, NaturalSystemSpec, ScalarPotential,
    VectorPotential,
};
use liaison_core::manifold::MetricField;
use liaison_core::reactions::ReactionModel;
use liaison_core::solver::{
    ConstraintBlock, IntegratorConfig, ParametricEmbedding, Scenario,
};
use nalgebra::{DMatrix, DVector};

pub fn circle_constraint(radius: f64) -> ConstraintSet<f64> {
    ConstraintSet::Holonomic(
        HolonomicConstraints::new_analytic(
            2,
            1,
            Arc::new(move |q: &DVector<f64>| {
                DVector::from_vec(vec![q[0] * q[0] + q[1] * q[1] - radius * radius])
            }),
            Arc::new(|q: &DVector<f64>| DMatrix::from_row_slice(1, 2, &[2.0 * q[0], 2.0 * q[1]])),
            Arc::new(|_q| vec![DMatrix::identity(2, 2) * 2.0]),
        )
        .unwrap(),
    )
}

/// Unit-mass point on the unit circle under gravity `g` (potential `g y`).
pub fn pendulum_scenario(g: f64, v0x: f64, t_end: f64, h: f64) -> Scenario<f64> {
    let spec = NaturalSystemSpec {
        metric: MetricField::constant(DMatrix::identity(2, 2)),
        vector_potential: None,
        scalar_potential: Some(ScalarPotential {
            value: Arc::new(move |q: &DVector<f64>| g * q[1]),
            gradient: Arc::new(move |_q| DVector::from_vec(vec![0.0, g])),
        }),
        coupling: 0.0,
    };
    Scenario {
        system: build_natural_lagrangian(&spec),
        dissipation: DissipativeForce::zero(2),
        blocks: vec![ConstraintBlock::new(
            circle_constraint(1.0),
            ReactionModel::IdealDalembert,
        )],
        q0: DVector::from_vec(vec![0.0, -1.0]),
        v0: DVector::from_vec(vec![v0x, 0.0]),
        t_end,
        config: IntegratorConfig {
            step: h,
            ..IntegratorConfig::default()
        },
        sample_stride: 1,
    }
}

/// Angle chart of the unit circle, measured from the bottom point:
/// `q = (sin y, -cos y)`.
pub fn pendulum_embedding() -> ParametricEmbedding<f64> {
    ParametricEmbedding::new_analytic(
        2,
        1,
        Arc::new(|y: &DVector<f64>| DVector::from_vec(vec![y[0].sin(), -y[0].cos()])),
        Arc::new(|y: &DVector<f64>| DMatrix::from_column_slice(2, 1, &[y[0].cos(), y[0].sin()])),
        Arc::new(|y: &DVector<f64>| {
            vec![
                DMatrix::from_element(1, 1, -y[0].sin()),
                DMatrix::from_element(1, 1, y[0].cos()),
            ]
        }),
    )
}

pub fn knife_edge_set() -> ConstraintSet<f64> {
    ConstraintSet::Pfaffian(
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
        .unwrap(),
    )
}

/// Free planar body with heading angle, rolling-style no-side-slip
/// constraint, unit mass and unit moment of inertia.
pub fn knife_edge_scenario(model: ReactionModel, mu0: f64, t_end: f64) -> Scenario<f64> {
    let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(3, 3)));
    let block = match model {
        ReactionModel::Vakonomic => {
            ConstraintBlock::vakonomic(knife_edge_set(), DVector::from_vec(vec![mu0]))
        }
        m => ConstraintBlock::new(knife_edge_set(), m),
    };
    Scenario {
        system: build_natural_lagrangian(&spec),
        dissipation: DissipativeForce::zero(3),
        blocks: vec![block],
        q0: DVector::zeros(3),
        v0: DVector::from_vec(vec![1.0, 0.0, 1.0]),
        t_end,
        config: IntegratorConfig::default(),
        sample_stride: 10,
    }
}

/// Unit-mass charged particle in the plane under a uniform magnetic field
/// of strength `b`, no electric potential.
pub fn charged_particle_scenario(b: f64, t_end: f64, h: f64) -> Scenario<f64> {
    let spec = NaturalSystemSpec {
        metric: MetricField::constant(DMatrix::identity(2, 2)),
        vector_potential: Some(VectorPotential {
            value: Arc::new(move |q: &DVector<f64>| {
                DVector::from_vec(vec![-b * q[1] / 2.0, b * q[0] / 2.0])
            }),
            derivative: Arc::new(move |_q| {
                DMatrix::from_row_slice(2, 2, &[0.0, -b / 2.0, b / 2.0, 0.0])
            }),
        }),
        scalar_potential: None,
        coupling: 1.0,
    };
    Scenario::unconstrained(
        build_natural_lagrangian(&spec),
        DissipativeForce::zero(2),
        DVector::zeros(2),
        DVector::from_vec(vec![1.0, 0.0]),
        t_end,
        IntegratorConfig {
            step: h,
            ..IntegratorConfig::default()
        },
    )
}
