//! Serde layout of the scenario file.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub system: Option<SystemSection>,
    pub affine_body: Option<AffineSection>,
    #[serde(default)]
    pub constraints: Vec<ConstraintSection>,
    pub initial: Option<InitialSection>,
    pub integrator: Option<IntegratorSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Builtin model name; mutually exclusive with the explicit fields.
    pub builtin: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, toml::Value>,
    /// Explicit natural system: dimension plus metric/potential data.
    pub dim: Option<usize>,
    /// "identity" or per-coordinate diagonal expressions.
    pub metric: Option<String>,
    #[serde(default)]
    pub metric_diagonal: Vec<String>,
    pub potential: Option<String>,
    #[serde(default)]
    pub vector_potential: Vec<String>,
    #[serde(default = "default_coupling")]
    pub coupling: f64,
    pub mass: Option<f64>,
}

fn default_coupling() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSection {
    pub builtin: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, toml::Value>,
    pub n: Option<usize>,
    pub mass: Option<f64>,
    /// Diagonal of the co-moving inertia tensor.
    #[serde(default)]
    pub inertia: Vec<f64>,
    /// Row-major full inertia matrix (overrides `inertia`).
    #[serde(default)]
    pub inertia_matrix: Vec<f64>,
    /// Diagonal of the spatial metric; empty = identity.
    #[serde(default)]
    pub g: Vec<f64>,
    /// Diagonal of the material metric; empty = identity.
    #[serde(default)]
    pub eta: Vec<f64>,
    pub variant: Option<String>,
    /// Potential expression in `r1..rn`, `phi11..phinn`.
    pub potential: Option<String>,
    /// Builtin potential: `{ name = "spring", stiffness = 2.0 }`.
    pub potential_builtin: Option<PotentialBuiltin>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialBuiltin {
    pub name: String,
    #[serde(default = "default_stiffness")]
    pub stiffness: f64,
}

fn default_stiffness() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub family: String,
    /// Residual expressions (holonomic/velocity) or coefficient-row
    /// expressions (pfaffian: k entries per constraint, flattened).
    #[serde(default)]
    pub expressions: Vec<String>,
    /// Pfaffian inhomogeneous terms, one expression per constraint.
    #[serde(default)]
    pub inhomogeneous: Vec<String>,
    #[serde(default = "default_reaction")]
    pub reaction: String,
}

fn default_reaction() -> String {
    "ideal".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default)]
    pub q0: Vec<f64>,
    #[serde(default)]
    pub v0: Vec<f64>,
    #[serde(default)]
    pub mu0: Vec<f64>,
    // affine form
    #[serde(default)]
    pub r0: Vec<f64>,
    #[serde(default)]
    pub rdot0: Vec<f64>,
    /// Row-major.
    #[serde(default)]
    pub phi0: Vec<f64>,
    #[serde(default)]
    pub phidot0: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub h: f64,
    pub t_end: f64,
    #[serde(default = "default_method")]
    pub method: String,
    /// `[alpha, beta]`; absent = stabilizer off.
    pub baumgarte: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub projection: bool,
    pub projection_tolerance: Option<f64>,
    pub admission_tolerance: Option<f64>,
    pub max_projection_iterations: Option<usize>,
}

fn default_method() -> String {
    "rk4".into()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_trajectory_file")]
    pub trajectory: String,
    #[serde(default = "default_summary_file")]
    pub summary: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            stride: default_stride(),
            trajectory: default_trajectory_file(),
            summary: default_summary_file(),
        }
    }
}

fn default_stride() -> usize {
    1
}

fn default_trajectory_file() -> String {
    "trajectory.csv".into()
}

fn default_summary_file() -> String {
    "summary.toml".into()
}

/// Metrics block of the emitted summary document.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryMetrics {
    pub samples: usize,
    pub max_constraint_residual: f64,
    pub relative_energy_drift: f64,
    pub max_reaction_power: f64,
    pub max_normalized_reaction_power: f64,
    pub final_time: f64,
    pub wall_time_s: f64,
}

/// Emitted summary document: configuration echo plus metrics.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryDoc {
    pub scenario: String,
    pub model: String,
    pub dimension: usize,
    pub constraint_counts: Vec<usize>,
    pub integrator: SummaryIntegrator,
    pub metrics: SummaryMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryIntegrator {
    pub h: f64,
    pub t_end: f64,
    pub method: String,
    pub projection: bool,
    pub baumgarte: Option<Vec<f64>>,
    pub stride: usize,
}
