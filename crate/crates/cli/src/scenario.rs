//! Turn a scenario document into something runnable: the builtin library,
//! expression-backed systems and constraints, and the validation that
//! guards the exit-code contract.

use std::collections::BTreeMap;
use std::sync::Arc;

use liaison_core::affine::{AffineBodyModel, AffineBodyState, ConstraintVariant, ForceLaw};
use liaison_core::constraints::{
    ConstraintSet, HolonomicConstraints, PfaffianConstraints, VelocityConstraints,
};
use liaison_core::dynamics::{
    build_natural_lagrangian, DissipativeForce, NaturalSystemSpec, ScalarPotential,
    VectorPotential,
};
use liaison_core::fd;
use liaison_core::manifold::MetricField;
use liaison_core::reactions::ReactionModel;
use liaison_core::solver::{
    ConstraintBlock, IntegratorConfig, Method, ParametricEmbedding, Scenario,
};
use nalgebra::{DMatrix, DVector};

use crate::expr::{self, CompiledExpr};
use crate::schema::*;

/// CLI-level error with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: unparseable or structurally invalid input.
    Parse(String),
    /// Exit 3: admission or rank failure at the initial state.
    Admission(String),
    /// Exit 4: integration failed mid-run.
    Step(String),
    /// Exit 1: filesystem problems.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Parse(_) => 2,
            CliError::Admission(_) => 3,
            CliError::Step(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Parse(m) | CliError::Admission(m) | CliError::Step(m) | CliError::Io(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message())
    }
}

impl std::error::Error for CliError {}

/// Map a core error raised while loading or validating.
pub fn load_error(e: liaison_core::Error) -> CliError {
    use liaison_core::Error::*;
    match e {
        Admission(m) => CliError::Admission(format!("admission failure: {m}")),
        DegenerateConstraint { message, condition } => CliError::Admission(format!(
            "degenerate constraints: {message} (condition {condition:.3e})"
        )),
        other => CliError::Parse(other.to_string()),
    }
}

/// Map a core error raised while integrating.
pub fn run_error(e: liaison_core::Error) -> CliError {
    use liaison_core::Error::*;
    match e {
        Admission(m) => CliError::Admission(format!("admission failure: {m}")),
        StepFailure { time, message } => {
            CliError::Step(format!("step failure at t = {time}: {message}"))
        }
        other => CliError::Step(other.to_string()),
    }
}

/// Initial data for the parametric comparison path of a builtin.
#[derive(Clone)]
pub struct EmbeddingData {
    pub embedding: ParametricEmbedding<f64>,
    pub y0: DVector<f64>,
    pub ydot0: DVector<f64>,
}

/// A loaded, runnable scenario.
pub enum Loaded {
    Generic {
        name: String,
        scenario: Scenario<f64>,
        embedding: Option<EmbeddingData>,
        /// Raw `initial.mu0` from the file, for reaction-model overrides.
        mu0_file: Vec<f64>,
        output: OutputSection,
    },
    Affine {
        name: String,
        model: AffineBodyModel<f64>,
        variant: ConstraintVariant,
        state0: AffineBodyState<f64>,
        config: IntegratorConfig<f64>,
        t_end: f64,
        output: OutputSection,
    },
}

impl Loaded {
    pub fn name(&self) -> &str {
        match self {
            Loaded::Generic { name, .. } | Loaded::Affine { name, .. } => name,
        }
    }

    pub fn output(&self) -> &OutputSection {
        match self {
            Loaded::Generic { output, .. } | Loaded::Affine { output, .. } => output,
        }
    }
}

fn param_f64(params: &BTreeMap<String, toml::Value>, key: &str, default: f64) -> Result<f64, CliError> {
    match params.get(key) {
        None => Ok(default),
        Some(toml::Value::Float(v)) => Ok(*v),
        Some(toml::Value::Integer(v)) => Ok(*v as f64),
        Some(other) => Err(CliError::Parse(format!(
            "system.params.{key}: expected a number, got {other}"
        ))),
    }
}

fn param_usize(
    params: &BTreeMap<String, toml::Value>,
    key: &str,
    default: usize,
) -> Result<usize, CliError> {
    match params.get(key) {
        None => Ok(default),
        Some(toml::Value::Integer(v)) if *v > 0 => Ok(*v as usize),
        Some(other) => Err(CliError::Parse(format!(
            "system.params.{key}: expected a positive integer, got {other}"
        ))),
    }
}

fn param_str(
    params: &BTreeMap<String, toml::Value>,
    key: &str,
    default: &str,
) -> Result<String, CliError> {
    match params.get(key) {
        None => Ok(default.to_string()),
        Some(toml::Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(CliError::Parse(format!(
            "system.params.{key}: expected a string, got {other}"
        ))),
    }
}

pub fn parse_reaction(name: &str) -> Result<ReactionModel, CliError> {
    match name {
        "ideal" | "dalembert" | "ideal_dalembert" => Ok(ReactionModel::IdealDalembert),
        "appell_chetaev" | "appell" | "chetaev" => Ok(ReactionModel::AppellChetaev),
        "vakonomic" => Ok(ReactionModel::Vakonomic),
        other => Err(CliError::Parse(format!(
            "unknown reaction model `{other}` (expected ideal, appell_chetaev, or vakonomic)"
        ))),
    }
}

fn parse_variant(name: &str) -> Result<ConstraintVariant, CliError> {
    match name {
        "unconstrained" | "free" => Ok(ConstraintVariant::Unconstrained),
        "rigid" => Ok(ConstraintVariant::Rigid),
        "isochoric" => Ok(ConstraintVariant::Isochoric),
        "conformal" => Ok(ConstraintVariant::Conformal),
        "rotationfree" | "rotation_free" => Ok(ConstraintVariant::RotationFree),
        other => Err(CliError::Parse(format!("unknown affine variant `{other}`"))),
    }
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    match name {
        "rk4" | "runge_kutta4" => Ok(Method::RungeKutta4),
        "euler" | "explicit_euler" => Ok(Method::ExplicitEuler),
        other => Err(CliError::Parse(format!("unknown integrator method `{other}`"))),
    }
}

fn integrator_config(section: &IntegratorSection) -> Result<(IntegratorConfig<f64>, f64), CliError> {
    let mut config = IntegratorConfig::<f64> {
        step: section.h,
        method: parse_method(&section.method)?,
        projection: section.projection,
        ..IntegratorConfig::default()
    };
    if let Some(b) = &section.baumgarte {
        if b.len() != 2 {
            return Err(CliError::Parse(
                "integrator.baumgarte must be [alpha, beta]".into(),
            ));
        }
        config.baumgarte = Some((b[0], b[1]));
    }
    if let Some(t) = section.projection_tolerance {
        config.projection_tolerance = t;
    }
    if let Some(t) = section.admission_tolerance {
        config.admission_tolerance = t;
    }
    if let Some(i) = section.max_projection_iterations {
        config.max_projection_iterations = i;
    }
    config.validate().map_err(load_error)?;
    Ok((config, section.t_end))
}

fn compile_in(
    source: &str,
    vars: &std::collections::HashMap<String, usize>,
    context: &str,
) -> Result<CompiledExpr, CliError> {
    expr::compile(source, vars)
        .map_err(|e| CliError::Parse(format!("{context}: `{source}`: {e}")))
}

/// Build one constraint set from its file section.
pub fn build_constraint_set(
    section: &ConstraintSection,
    dim: usize,
) -> Result<ConstraintSet<f64>, CliError> {
    match section.family.as_str() {
        "holonomic" => {
            let vars = expr::phase_variables(dim, false);
            let exprs: Vec<CompiledExpr> = section
                .expressions
                .iter()
                .map(|s| compile_in(s, &vars, "constraints.expressions"))
                .collect::<Result<_, _>>()?;
            let m = exprs.len();
            let residual = Arc::new(move |q: &DVector<f64>| {
                let vals: Vec<f64> = q.iter().copied().collect();
                DVector::from_iterator(m, exprs.iter().map(|e| e.eval(&vals)))
            });
            HolonomicConstraints::from_residual(dim, m, residual)
                .map(ConstraintSet::Holonomic)
                .map_err(load_error)
        }
        "pfaffian" => {
            if section.expressions.len() % dim != 0 {
                return Err(CliError::Parse(format!(
                    "pfaffian constraints need k = {dim} coefficient expressions per row, got {}",
                    section.expressions.len()
                )));
            }
            let m = section.expressions.len() / dim;
            let vars = expr::phase_variables(dim, false);
            let coeffs: Vec<CompiledExpr> = section
                .expressions
                .iter()
                .map(|s| compile_in(s, &vars, "constraints.expressions"))
                .collect::<Result<_, _>>()?;
            let coeff_eval = Arc::new(move |q: &DVector<f64>| {
                let vals: Vec<f64> = q.iter().copied().collect();
                DMatrix::from_fn(m, q.len(), |a, i| coeffs[a * q.len() + i].eval(&vals))
            });
            let mut set = PfaffianConstraints::from_coefficients(dim, m, coeff_eval)
                .map_err(load_error)?;
            if !section.inhomogeneous.is_empty() {
                if section.inhomogeneous.len() != m {
                    return Err(CliError::Parse(format!(
                        "pfaffian inhomogeneous terms: expected {m} expressions, got {}",
                        section.inhomogeneous.len()
                    )));
                }
                let inhom: Vec<CompiledExpr> = section
                    .inhomogeneous
                    .iter()
                    .map(|s| compile_in(s, &vars, "constraints.inhomogeneous"))
                    .collect::<Result<_, _>>()?;
                let inhom2 = inhom.clone();
                let value = Arc::new(move |q: &DVector<f64>| {
                    let vals: Vec<f64> = q.iter().copied().collect();
                    DVector::from_iterator(m, inhom2.iter().map(|e| e.eval(&vals)))
                });
                let value2 = value.clone();
                let jac = Arc::new(move |q: &DVector<f64>| {
                    fd::jacobian(&|p: &DVector<f64>| value2(p), q, fd::default_step())
                });
                set = set.with_inhomogeneous(value, jac);
            }
            Ok(ConstraintSet::Pfaffian(set))
        }
        "velocity" => {
            let vars = expr::phase_variables(dim, true);
            let exprs: Vec<CompiledExpr> = section
                .expressions
                .iter()
                .map(|s| compile_in(s, &vars, "constraints.expressions"))
                .collect::<Result<_, _>>()?;
            let m = exprs.len();
            let residual = Arc::new(move |q: &DVector<f64>, v: &DVector<f64>| {
                let mut vals: Vec<f64> = q.iter().copied().collect();
                vals.extend(v.iter().copied());
                DVector::from_iterator(m, exprs.iter().map(|e| e.eval(&vals)))
            });
            VelocityConstraints::from_residual(dim, m, residual)
                .map(ConstraintSet::Velocity)
                .map_err(load_error)
        }
        other => Err(CliError::Parse(format!(
            "unknown constraint family `{other}` (expected holonomic, pfaffian, or velocity)"
        ))),
    }
}

struct BuiltinSystem {
    name: String,
    dim: usize,
    system: liaison_core::dynamics::LagrangianSystem<f64>,
    blocks: Vec<ConstraintBlock<f64>>,
    embedding_builder: Option<Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> EmbeddingData>>,
}

fn pendulum_embedding_data(length: f64) -> ParametricEmbedding<f64> {
    ParametricEmbedding::new_analytic(
        2,
        1,
        Arc::new(move |y: &DVector<f64>| {
            DVector::from_vec(vec![length * y[0].sin(), -length * y[0].cos()])
        }),
        Arc::new(move |y: &DVector<f64>| {
            DMatrix::from_column_slice(2, 1, &[length * y[0].cos(), length * y[0].sin()])
        }),
        Arc::new(move |y: &DVector<f64>| {
            vec![
                DMatrix::from_element(1, 1, -length * y[0].sin()),
                DMatrix::from_element(1, 1, length * y[0].cos()),
            ]
        }),
    )
}

fn builtin_generic(
    name: &str,
    params: &BTreeMap<String, toml::Value>,
    mu0: &[f64],
) -> Result<Option<BuiltinSystem>, CliError> {
    match name {
        "free_particle" => {
            let dim = param_usize(params, "dim", 2)?;
            let mass = param_f64(params, "mass", 1.0)?;
            let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(
                DMatrix::identity(dim, dim) * mass,
            ));
            Ok(Some(BuiltinSystem {
                name: name.into(),
                dim,
                system: build_natural_lagrangian(&spec),
                blocks: vec![],
                embedding_builder: None,
            }))
        }
        "pendulum_circle" => {
            let mass = param_f64(params, "mass", 1.0)?;
            let gravity = param_f64(params, "gravity", 9.81)?;
            let length = param_f64(params, "length", 1.0)?;
            let reaction = parse_reaction(&param_str(params, "reaction", "ideal")?)?;
            let spec = NaturalSystemSpec {
                metric: MetricField::constant(DMatrix::identity(2, 2) * mass),
                vector_potential: None,
                scalar_potential: Some(ScalarPotential {
                    value: Arc::new(move |q: &DVector<f64>| mass * gravity * q[1]),
                    gradient: Arc::new(move |_q| DVector::from_vec(vec![0.0, mass * gravity])),
                }),
                coupling: 0.0,
            };
            let set = ConstraintSet::Holonomic(
                HolonomicConstraints::new_analytic(
                    2,
                    1,
                    Arc::new(move |q: &DVector<f64>| {
                        DVector::from_vec(vec![q[0] * q[0] + q[1] * q[1] - length * length])
                    }),
                    Arc::new(|q: &DVector<f64>| {
                        DMatrix::from_row_slice(1, 2, &[2.0 * q[0], 2.0 * q[1]])
                    }),
                    Arc::new(|_q| vec![DMatrix::identity(2, 2) * 2.0]),
                )
                .map_err(load_error)?,
            );
            let block = match reaction {
                ReactionModel::Vakonomic => {
                    ConstraintBlock::vakonomic(set, DVector::from_vec(mu0.to_vec()))
                }
                m => ConstraintBlock::new(set, m),
            };
            Ok(Some(BuiltinSystem {
                name: name.into(),
                dim: 2,
                system: build_natural_lagrangian(&spec),
                blocks: vec![block],
                embedding_builder: Some(Box::new(move |q0, v0| {
                    let embedding = pendulum_embedding_data(length);
                    let theta0 = q0[0].atan2(-q0[1]);
                    let jac = DVector::from_vec(vec![
                        length * theta0.cos(),
                        length * theta0.sin(),
                    ]);
                    let thetadot0 = jac.dot(v0) / jac.dot(&jac);
                    EmbeddingData {
                        embedding,
                        y0: DVector::from_vec(vec![theta0]),
                        ydot0: DVector::from_vec(vec![thetadot0]),
                    }
                })),
            }))
        }
        "knife_edge" => {
            let mass = param_f64(params, "mass", 1.0)?;
            let inertia = param_f64(params, "inertia", 1.0)?;
            let reaction = parse_reaction(&param_str(params, "reaction", "ideal")?)?;
            let metric = DMatrix::from_diagonal(&DVector::from_vec(vec![mass, mass, inertia]));
            let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(metric));
            let set = ConstraintSet::Pfaffian(
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
                .map_err(load_error)?,
            );
            let block = match reaction {
                ReactionModel::Vakonomic => {
                    ConstraintBlock::vakonomic(set, DVector::from_vec(mu0.to_vec()))
                }
                m => ConstraintBlock::new(set, m),
            };
            Ok(Some(BuiltinSystem {
                name: name.into(),
                dim: 3,
                system: build_natural_lagrangian(&spec),
                blocks: vec![block],
                embedding_builder: None,
            }))
        }
        "charged_particle_uniform_field" => {
            let mass = param_f64(params, "mass", 1.0)?;
            let field = param_f64(params, "field", 1.0)?;
            let epsilon = param_f64(params, "epsilon", 1.0)?;
            let spec = NaturalSystemSpec {
                metric: MetricField::constant(DMatrix::identity(2, 2) * mass),
                vector_potential: Some(VectorPotential {
                    value: Arc::new(move |q: &DVector<f64>| {
                        DVector::from_vec(vec![-field * q[1] / 2.0, field * q[0] / 2.0])
                    }),
                    derivative: Arc::new(move |_q| {
                        DMatrix::from_row_slice(2, 2, &[0.0, -field / 2.0, field / 2.0, 0.0])
                    }),
                }),
                scalar_potential: None,
                coupling: epsilon,
            };
            Ok(Some(BuiltinSystem {
                name: name.into(),
                dim: 2,
                system: build_natural_lagrangian(&spec),
                blocks: vec![],
                embedding_builder: None,
            }))
        }
        _ => Ok(None),
    }
}

fn diag_or_identity(n: usize, entries: &[f64], what: &str) -> Result<DMatrix<f64>, CliError> {
    if entries.is_empty() {
        Ok(DMatrix::identity(n, n))
    } else if entries.len() == n {
        Ok(DMatrix::from_diagonal(&DVector::from_vec(entries.to_vec())))
    } else {
        Err(CliError::Parse(format!(
            "{what}: expected {n} diagonal entries, got {}",
            entries.len()
        )))
    }
}

fn spring_force_law(n: usize, stiffness: f64, g: DMatrix<f64>, eta: DMatrix<f64>) -> ForceLaw<f64> {
    // V = stiffness/4 * tr((phi^T g phi - eta)^2)
    let g1 = g.clone();
    let eta1 = eta.clone();
    let g2 = g;
    let eta2 = eta;
    ForceLaw::Potential {
        value: Arc::new(move |_r, phi: &DMatrix<f64>| {
            let c = phi.transpose() * &g1 * phi - &eta1;
            0.25 * stiffness * (&c * &c).trace()
        }),
        grad_r: Arc::new(move |_r, _phi| DVector::zeros(n)),
        grad_phi: Arc::new(move |_r, phi: &DMatrix<f64>| {
            let c = phi.transpose() * &g2 * phi - &eta2;
            &g2 * phi * c * stiffness
        }),
    }
}

fn expression_force_law(n: usize, source: &str) -> Result<ForceLaw<f64>, CliError> {
    let vars = expr::affine_variables(n);
    let compiled = compile_in(source, &vars, "affine_body.potential")?;
    let pack = move |r: &DVector<f64>, phi: &DMatrix<f64>| -> Vec<f64> {
        let mut vals = Vec::with_capacity(n + n * n);
        vals.extend(r.iter().copied());
        for i in 0..n {
            for j in 0..n {
                vals.push(phi[(i, j)]);
            }
        }
        vals
    };
    let c1 = compiled.clone();
    let p1 = pack;
    let value = Arc::new(move |r: &DVector<f64>, phi: &DMatrix<f64>| c1.eval(&p1(r, phi)));
    let c2 = compiled.clone();
    let grad_r = Arc::new(move |r: &DVector<f64>, phi: &DMatrix<f64>| {
        let base = pack(r, phi);
        let mut out = DVector::zeros(n);
        let h = 1e-6;
        for i in 0..n {
            let step = h * base[i].abs().max(1.0);
            let mut plus = base.clone();
            plus[i] += step;
            let mut minus = base.clone();
            minus[i] -= step;
            out[i] = (c2.eval(&plus) - c2.eval(&minus)) / (2.0 * step);
        }
        out
    });
    let c3 = compiled;
    let grad_phi = Arc::new(move |r: &DVector<f64>, phi: &DMatrix<f64>| {
        let base = pack(r, phi);
        let mut out = DMatrix::zeros(n, n);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..n {
                let idx = n + i * n + j;
                let step = h * base[idx].abs().max(1.0);
                let mut plus = base.clone();
                plus[idx] += step;
                let mut minus = base.clone();
                minus[idx] -= step;
                out[(i, j)] = (c3.eval(&plus) - c3.eval(&minus)) / (2.0 * step);
            }
        }
        out
    });
    Ok(ForceLaw::Potential {
        value,
        grad_r,
        grad_phi,
    })
}

struct AffineDefaults {
    n: usize,
    mass: f64,
    inertia: DMatrix<f64>,
    variant: ConstraintVariant,
    force: ForceLaw<f64>,
}

fn builtin_affine(
    name: &str,
    params: &BTreeMap<String, toml::Value>,
) -> Result<Option<AffineDefaults>, CliError> {
    let make = |n: usize,
                inertia: DMatrix<f64>,
                variant: ConstraintVariant,
                force: ForceLaw<f64>,
                mass: f64| {
        Some(AffineDefaults {
            n,
            mass,
            inertia,
            variant,
            force,
        })
    };
    let spring = |n: usize, k: f64| {
        spring_force_law(n, k, DMatrix::identity(n, n), DMatrix::identity(n, n))
    };
    Ok(match name {
        "affine_free" => {
            let n = param_usize(params, "n", 2)?;
            let mass = param_f64(params, "mass", 1.0)?;
            make(
                n,
                DMatrix::identity(n, n),
                ConstraintVariant::Unconstrained,
                ForceLaw::None,
                mass,
            )
        }
        "affine_rigid" => {
            let n = param_usize(params, "n", 3)?;
            let mass = param_f64(params, "mass", 1.0)?;
            let inertia = if n == 3 {
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]))
            } else {
                DMatrix::identity(n, n)
            };
            make(n, inertia, ConstraintVariant::Rigid, ForceLaw::None, mass)
        }
        "affine_isochoric" => {
            let n = param_usize(params, "n", 2)?;
            let mass = param_f64(params, "mass", 1.0)?;
            make(
                n,
                DMatrix::identity(n, n),
                ConstraintVariant::Isochoric,
                ForceLaw::None,
                mass,
            )
        }
        "affine_conformal" => {
            let n = param_usize(params, "n", 2)?;
            let mass = param_f64(params, "mass", 1.0)?;
            let stiffness = param_f64(params, "stiffness", 4.0)?;
            make(
                n,
                DMatrix::identity(n, n),
                ConstraintVariant::Conformal,
                spring(n, stiffness),
                mass,
            )
        }
        "affine_rotationfree" => {
            let n = param_usize(params, "n", 2)?;
            let mass = param_f64(params, "mass", 1.0)?;
            let stiffness = param_f64(params, "stiffness", 2.0)?;
            make(
                n,
                DMatrix::identity(n, n),
                ConstraintVariant::RotationFree,
                spring(n, stiffness),
                mass,
            )
        }
        _ => None,
    })
}

fn custom_system(section: &SystemSection) -> Result<BuiltinSystem, CliError> {
    let dim = section.dim.ok_or_else(|| {
        CliError::Parse("system: either `builtin` or `dim` must be given".into())
    })?;
    if dim == 0 {
        return Err(CliError::Parse("system.dim must be positive".into()));
    }
    let mass = section.mass.unwrap_or(1.0);
    let metric = match section.metric.as_deref() {
        None | Some("identity") => {
            if section.metric_diagonal.is_empty() {
                MetricField::constant(DMatrix::identity(dim, dim) * mass)
            } else {
                let vars = expr::phase_variables(dim, false);
                let exprs: Vec<CompiledExpr> = section
                    .metric_diagonal
                    .iter()
                    .map(|s| compile_in(s, &vars, "system.metric_diagonal"))
                    .collect::<Result<_, _>>()?;
                if exprs.len() != dim {
                    return Err(CliError::Parse(format!(
                        "system.metric_diagonal: expected {dim} entries, got {}",
                        exprs.len()
                    )));
                }
                MetricField::new(
                    dim,
                    Arc::new(move |q: &DVector<f64>| {
                        let vals: Vec<f64> = q.iter().copied().collect();
                        DMatrix::from_diagonal(&DVector::from_iterator(
                            exprs.len(),
                            exprs.iter().map(|e| e.eval(&vals)),
                        ))
                    }),
                )
            }
        }
        Some(other) => {
            return Err(CliError::Parse(format!(
                "system.metric: unknown kind `{other}` (use \"identity\" or metric_diagonal)"
            )))
        }
    };
    let scalar_potential = match &section.potential {
        None => None,
        Some(src) => {
            let vars = expr::phase_variables(dim, false);
            let compiled = compile_in(src, &vars, "system.potential")?;
            let value = Arc::new(move |q: &DVector<f64>| {
                let vals: Vec<f64> = q.iter().copied().collect();
                compiled.eval(&vals)
            });
            Some(ScalarPotential::from_value(value))
        }
    };
    let vector_potential = if section.vector_potential.is_empty() {
        None
    } else {
        if section.vector_potential.len() != dim {
            return Err(CliError::Parse(format!(
                "system.vector_potential: expected {dim} entries, got {}",
                section.vector_potential.len()
            )));
        }
        let vars = expr::phase_variables(dim, false);
        let exprs: Vec<CompiledExpr> = section
            .vector_potential
            .iter()
            .map(|s| compile_in(s, &vars, "system.vector_potential"))
            .collect::<Result<_, _>>()?;
        let exprs2 = exprs.clone();
        let value = Arc::new(move |q: &DVector<f64>| {
            let vals: Vec<f64> = q.iter().copied().collect();
            DVector::from_iterator(exprs2.len(), exprs2.iter().map(|e| e.eval(&vals)))
        });
        let value2 = value.clone();
        let derivative = Arc::new(move |q: &DVector<f64>| {
            fd::jacobian(&|p: &DVector<f64>| value2(p), q, fd::default_step())
        });
        Some(VectorPotential { value, derivative })
    };
    let spec = NaturalSystemSpec {
        metric,
        vector_potential,
        scalar_potential,
        coupling: section.coupling,
    };
    Ok(BuiltinSystem {
        name: "custom".into(),
        dim,
        system: build_natural_lagrangian(&spec),
        blocks: vec![],
        embedding_builder: None,
    })
}

/// Parse and assemble a scenario document. All structural problems are
/// `CliError::Parse` (exit 2).
pub fn load(text: &str) -> Result<Loaded, CliError> {
    let doc: ScenarioDoc =
        toml::from_str(text).map_err(|e| CliError::Parse(format!("scenario parse error: {e}")))?;

    match (&doc.system, &doc.affine_body) {
        (Some(_), Some(_)) => {
            return Err(CliError::Parse(
                "exactly one of `system` and `affine_body` must be present, found both".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Parse(
                "exactly one of `system` and `affine_body` must be present, found neither".into(),
            ))
        }
        _ => {}
    }
    let initial = doc
        .initial
        .as_ref()
        .ok_or_else(|| CliError::Parse("missing `initial` section".into()))?;
    let integrator = doc
        .integrator
        .as_ref()
        .ok_or_else(|| CliError::Parse("missing `integrator` section".into()))?;
    let (config, t_end) = integrator_config(integrator)?;

    if let Some(system) = &doc.system {
        let base = match &system.builtin {
            Some(name) => builtin_generic(name, &system.params, &initial.mu0)?
                .ok_or_else(|| CliError::Parse(format!("unknown builtin system `{name}`")))?,
            None => custom_system(system)?,
        };
        let dim = base.dim;
        if initial.q0.len() != dim || initial.v0.len() != dim {
            return Err(CliError::Parse(format!(
                "initial state must have q0 and v0 of length {dim}, got ({}, {})",
                initial.q0.len(),
                initial.v0.len()
            )));
        }
        let mut blocks = base.blocks;
        let mut mu_cursor = 0usize;
        // builtin vakonomic blocks already consumed initial.mu0
        for b in &blocks {
            if b.model == ReactionModel::Vakonomic {
                mu_cursor += b.set.count();
            }
        }
        for section in &doc.constraints {
            let set = build_constraint_set(section, dim)?;
            let model = parse_reaction(&section.reaction)?;
            let block = if model == ReactionModel::Vakonomic {
                let m = set.count();
                let got = initial.mu0.len().saturating_sub(mu_cursor);
                let mu0 = if got >= m {
                    DVector::from_vec(initial.mu0[mu_cursor..mu_cursor + m].to_vec())
                } else {
                    DVector::zeros(m)
                };
                mu_cursor += m;
                ConstraintBlock::vakonomic(set, mu0)
            } else {
                ConstraintBlock::new(set, model)
            };
            blocks.push(block);
        }
        let q0 = DVector::from_vec(initial.q0.clone());
        let v0 = DVector::from_vec(initial.v0.clone());
        let embedding = base
            .embedding_builder
            .as_ref()
            .map(|build| build(&q0, &v0));
        let scenario = Scenario {
            system: base.system,
            dissipation: DissipativeForce::zero(dim),
            blocks,
            q0,
            v0,
            t_end,
            config,
            sample_stride: doc.output.stride,
        };
        Ok(Loaded::Generic {
            name: base.name,
            scenario,
            embedding,
            mu0_file: initial.mu0.clone(),
            output: doc.output,
        })
    } else {
        let section = doc.affine_body.as_ref().expect("checked above");
        if !doc.constraints.is_empty() {
            return Err(CliError::Parse(
                "affine_body scenarios carry their constraints in `variant`, not in `constraints`"
                    .into(),
            ));
        }
        let defaults = match &section.builtin {
            Some(name) => Some(builtin_affine(name, &section.params)?.ok_or_else(|| {
                CliError::Parse(format!("unknown builtin affine body `{name}`"))
            })?),
            None => None,
        };
        let n = section
            .n
            .or(defaults.as_ref().map(|d| d.n))
            .ok_or_else(|| CliError::Parse("affine_body: `n` is required".into()))?;
        let mass = section
            .mass
            .or(defaults.as_ref().map(|d| d.mass))
            .unwrap_or(1.0);
        let inertia = if !section.inertia_matrix.is_empty() {
            if section.inertia_matrix.len() != n * n {
                return Err(CliError::Parse(format!(
                    "affine_body.inertia_matrix: expected {} entries, got {}",
                    n * n,
                    section.inertia_matrix.len()
                )));
            }
            DMatrix::from_row_slice(n, n, &section.inertia_matrix)
        } else if !section.inertia.is_empty() {
            diag_or_identity(n, &section.inertia, "affine_body.inertia")?
        } else if let Some(d) = &defaults {
            if d.inertia.nrows() == n {
                d.inertia.clone()
            } else {
                DMatrix::identity(n, n)
            }
        } else {
            DMatrix::identity(n, n)
        };
        let g = diag_or_identity(n, &section.g, "affine_body.g")?;
        let eta = diag_or_identity(n, &section.eta, "affine_body.eta")?;
        let variant = match &section.variant {
            Some(v) => parse_variant(v)?,
            None => defaults
                .as_ref()
                .map(|d| d.variant)
                .ok_or_else(|| CliError::Parse("affine_body: `variant` is required".into()))?,
        };
        let force = if let Some(p) = &section.potential_builtin {
            match p.name.as_str() {
                "spring" => spring_force_law(n, p.stiffness, g.clone(), eta.clone()),
                other => {
                    return Err(CliError::Parse(format!(
                        "unknown builtin potential `{other}`"
                    )))
                }
            }
        } else if let Some(src) = &section.potential {
            expression_force_law(n, src)?
        } else if let Some(d) = defaults {
            d.force
        } else {
            ForceLaw::None
        };
        let model = AffineBodyModel {
            spatial_dim: n,
            mass,
            inertia,
            spatial_metric: g,
            material_metric: eta,
            force,
        };
        model.validate().map_err(load_error)?;

        let take_vec = |values: &[f64], len: usize, what: &str| -> Result<DVector<f64>, CliError> {
            if values.is_empty() {
                Ok(DVector::zeros(len))
            } else if values.len() == len {
                Ok(DVector::from_vec(values.to_vec()))
            } else {
                Err(CliError::Parse(format!(
                    "initial.{what}: expected {len} entries, got {}",
                    values.len()
                )))
            }
        };
        let r0 = take_vec(&initial.r0, n, "r0")?;
        let rdot0 = take_vec(&initial.rdot0, n, "rdot0")?;
        let phi0 = if initial.phi0.is_empty() {
            DMatrix::identity(n, n)
        } else if initial.phi0.len() == n * n {
            DMatrix::from_row_slice(n, n, &initial.phi0)
        } else {
            return Err(CliError::Parse(format!(
                "initial.phi0: expected {} entries, got {}",
                n * n,
                initial.phi0.len()
            )));
        };
        let phidot0 = if initial.phidot0.is_empty() {
            DMatrix::zeros(n, n)
        } else if initial.phidot0.len() == n * n {
            DMatrix::from_row_slice(n, n, &initial.phidot0)
        } else {
            return Err(CliError::Parse(format!(
                "initial.phidot0: expected {} entries, got {}",
                n * n,
                initial.phidot0.len()
            )));
        };
        let state0 = AffineBodyState::new(r0, rdot0, phi0, phidot0);
        let name = section
            .builtin
            .clone()
            .unwrap_or_else(|| format!("affine_{}", variant.name()));
        Ok(Loaded::Affine {
            name,
            model,
            variant,
            state0,
            config,
            t_end,
            output: doc.output,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PENDULUM: &str = r#"
[system]
builtin = "pendulum_circle"
[system.params]
gravity = 9.81

[initial]
q0 = [0.0, -1.0]
v0 = [2.0, 0.0]

[integrator]
h = 1e-3
t_end = 1.0

[output]
stride = 10
"#;

    #[test]
    fn loads_builtin_pendulum() {
        let loaded = load(PENDULUM).unwrap();
        match loaded {
            Loaded::Generic {
                name,
                scenario,
                embedding,
                ..
            } => {
                assert_eq!(name, "pendulum_circle");
                assert_eq!(scenario.dim(), 2);
                assert_eq!(scenario.blocks.len(), 1);
                assert!(embedding.is_some());
            }
            _ => panic!("expected generic scenario"),
        }
    }

    #[test]
    fn missing_initial_is_parse_error() {
        let text = PENDULUM.replace("[initial]", "[initial_misnamed]");
        let err = match load(&text) {
            Err(e) => e,
            Ok(_) => panic!("expected a parse error"),
        };
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn both_sections_rejected() {
        let text = format!("{PENDULUM}\n[affine_body]\nbuiltin = \"affine_free\"\n");
        let err = match load(&text) {
            Err(e) => e,
            Ok(_) => panic!("expected a parse error"),
        };
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn custom_system_with_expressions() {
        let text = r#"
[system]
dim = 2
potential = "9.81 * q2"

[[constraints]]
family = "holonomic"
expressions = ["q1^2 + q2^2 - 1"]
reaction = "ideal"

[initial]
q0 = [0.0, -1.0]
v0 = [1.0, 0.0]

[integrator]
h = 1e-3
t_end = 0.5
"#;
        let loaded = load(text).unwrap();
        match loaded {
            Loaded::Generic { scenario, .. } => {
                assert_eq!(scenario.blocks.len(), 1);
                scenario.validate().unwrap();
            }
            _ => panic!("expected generic"),
        }
    }

    #[test]
    fn bad_expression_reports_column() {
        let text = r#"
[system]
dim = 2
potential = "9.81 * zz"

[initial]
q0 = [0.0, -1.0]
v0 = [1.0, 0.0]

[integrator]
h = 1e-3
t_end = 0.5
"#;
        let err = match load(text) {
            Err(e) => e,
            Ok(_) => panic!("expected a parse error"),
        };
        assert_eq!(err.exit_code(), 2);
        assert!(err.message().contains("column"), "{}", err.message());
    }

    #[test]
    fn affine_builtin_loads() {
        let text = r#"
[affine_body]
builtin = "affine_rigid"

[initial]
phidot0 = [0.0, -0.1, 1.0, 0.1, 0.0, -0.2, -1.0, 0.2, 0.0]

[integrator]
h = 1e-3
t_end = 1.0
"#;
        let loaded = load(text).unwrap();
        match loaded {
            Loaded::Affine { model, variant, .. } => {
                assert_eq!(model.spatial_dim, 3);
                assert_eq!(variant, ConstraintVariant::Rigid);
            }
            _ => panic!("expected affine"),
        }
    }
}
