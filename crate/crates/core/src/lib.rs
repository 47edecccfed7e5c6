//! Numerical engine for constrained Lagrangian mechanics.
//!
//! The crate covers three constraint families (holonomic, Pfaffian, and
//! velocity-nonlinear), three reaction laws (ideal d'Alembert,
//! Appell-Chetaev, and vakonomic), multiplier and parametric solution
//! paths with drift stabilization, and a complete affinely rigid body
//! model with rigid, isochoric, conformal and rotation-free variants.
//!
//! Everything numeric is generic over the scalar type through [`Real`];
//! the `*64` aliases at the crate root pin the common double-precision
//! instantiation.

pub mod affine;
pub mod constraints;
pub mod dynamics;
pub mod error;
pub mod fd;
pub mod manifold;
pub mod reactions;
pub mod scalar;
pub mod solver;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases for the main types.
pub type MetricField64 = manifold::MetricField<f64>;
pub type ConfigurationSpace64 = manifold::ConfigurationSpace;
pub type LagrangianSystem64 = dynamics::LagrangianSystem<f64>;
pub type DissipativeForce64 = dynamics::DissipativeForce<f64>;
pub type HolonomicConstraints64 = constraints::HolonomicConstraints<f64>;
pub type PfaffianConstraints64 = constraints::PfaffianConstraints<f64>;
pub type VelocityConstraints64 = constraints::VelocityConstraints<f64>;
pub type ConstraintSet64 = constraints::ConstraintSet<f64>;
pub type Scenario64 = solver::Scenario<f64>;
pub type TrajectoryRecord64 = solver::TrajectoryRecord<f64>;
pub type IntegratorConfig64 = solver::IntegratorConfig<f64>;
pub type AffineBodyModel64 = affine::AffineBodyModel<f64>;
pub type AffineBodyState64 = affine::AffineBodyState<f64>;
