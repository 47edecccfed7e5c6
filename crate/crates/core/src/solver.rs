//! Closure of the equations of motion for each reaction model, fixed-step
//! time integration with drift stabilization, parametric reduction, and
//! trajectory diagnostics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::constraints::{
    check_full_row_rank, differentiated_form, lift_holonomic_to_pfaffian,
    lift_pfaffian_to_velocity, ConstraintSet, VelocityConstraints,
};
use crate::dynamics::{applied_force, DissipativeForce, LagrangianSystem, PhaseFn};
use crate::error::{Error, Result};
use crate::fd;
use crate::manifold::PointFn;
use crate::reactions::{vakonomic_reaction, MultiplierState, ReactionModel};
use crate::scalar::Real;

/// Time stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Classical fourth-order explicit Runge-Kutta (default).
    RungeKutta4,
    /// First-order explicit Euler, kept for diagnostics.
    ExplicitEuler,
}

/// Fixed-step integrator configuration.
#[derive(Debug, Clone, Copy)]
pub struct IntegratorConfig<T: Real> {
    pub step: T,
    pub method: Method,
    /// Feedback coefficients `(alpha, beta)` for the twice-differentiated
    /// holonomic constraints; `None` disables the stabilizer.
    pub baumgarte: Option<(T, T)>,
    pub projection: bool,
    pub projection_tolerance: T,
    pub admission_tolerance: T,
    pub max_projection_iterations: usize,
}

impl<T: Real> Default for IntegratorConfig<T> {
    fn default() -> Self {
        Self {
            step: T::of(1e-3),
            method: Method::RungeKutta4,
            baumgarte: None,
            projection: true,
            projection_tolerance: T::of(1e-12),
            admission_tolerance: T::of(1e-9),
            max_projection_iterations: 20,
        }
    }
}

impl<T: Real> IntegratorConfig<T> {
    /// Standard critically-damped stabilizer coefficients.
    pub fn default_baumgarte() -> (T, T) {
        (T::of(10.0), T::of(10.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.step <= T::zero() {
            return Err(Error::Configuration("step size must be positive".into()));
        }
        if self.projection_tolerance <= T::zero() || self.admission_tolerance <= T::zero() {
            return Err(Error::Configuration("tolerances must be positive".into()));
        }
        if let Some((a, b)) = self.baumgarte {
            if a < T::zero() || b < T::zero() {
                return Err(Error::Configuration(
                    "Baumgarte coefficients must be nonnegative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One constraint set together with its reaction law; vakonomic blocks
/// carry the initial multipliers.
#[derive(Clone)]
pub struct ConstraintBlock<T: Real> {
    pub set: ConstraintSet<T>,
    pub model: ReactionModel,
    pub mu0: Option<DVector<T>>,
}

impl<T: Real> ConstraintBlock<T> {
    pub fn new(set: ConstraintSet<T>, model: ReactionModel) -> Self {
        Self {
            set,
            model,
            mu0: None,
        }
    }

    pub fn vakonomic(set: ConstraintSet<T>, mu0: DVector<T>) -> Self {
        Self {
            set,
            model: ReactionModel::Vakonomic,
            mu0: Some(mu0),
        }
    }

    fn initial_mu(&self) -> DVector<T> {
        if self.model == ReactionModel::Vakonomic {
            self.mu0
                .clone()
                .unwrap_or_else(|| DVector::zeros(self.set.count()))
        } else {
            DVector::zeros(0)
        }
    }
}

/// A complete simulation problem.
#[derive(Clone)]
pub struct Scenario<T: Real> {
    pub system: LagrangianSystem<T>,
    pub dissipation: DissipativeForce<T>,
    pub blocks: Vec<ConstraintBlock<T>>,
    pub q0: DVector<T>,
    pub v0: DVector<T>,
    pub t_end: T,
    pub config: IntegratorConfig<T>,
    /// Record every n-th accepted step.
    pub sample_stride: usize,
}

impl<T: Real> Scenario<T> {
    pub fn unconstrained(
        system: LagrangianSystem<T>,
        dissipation: DissipativeForce<T>,
        q0: DVector<T>,
        v0: DVector<T>,
        t_end: T,
        config: IntegratorConfig<T>,
    ) -> Self {
        Self {
            system,
            dissipation,
            blocks: Vec::new(),
            q0,
            v0,
            t_end,
            config,
            sample_stride: 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn initial_mus(&self) -> Vec<DVector<T>> {
        self.blocks.iter().map(|b| b.initial_mu()).collect()
    }

    /// Model compatibility, multiplier shapes, rank, and admission of the
    /// initial state.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.q0.len() != self.dim() || self.v0.len() != self.dim() {
            return Err(Error::Configuration(format!(
                "initial state has dimensions ({}, {}), system has {}",
                self.q0.len(),
                self.v0.len(),
                self.dim()
            )));
        }
        if self.t_end <= T::zero() {
            return Err(Error::Configuration("time span must be positive".into()));
        }
        if self.sample_stride == 0 {
            return Err(Error::Configuration("sample stride must be positive".into()));
        }
        for (idx, block) in self.blocks.iter().enumerate() {
            if block.set.dim() != self.dim() {
                return Err(Error::Configuration(format!(
                    "constraint set {idx} lives in dimension {}, system in {}",
                    block.set.dim(),
                    self.dim()
                )));
            }
            if !block.model.accepts(&block.set) {
                return Err(Error::Configuration(format!(
                    "reaction model {} does not accept {} constraints (set {idx})",
                    block.model.name(),
                    block.set.family_name()
                )));
            }
            if block.model == ReactionModel::Vakonomic {
                if let Some(mu0) = &block.mu0 {
                    if mu0.len() != block.set.count() {
                        return Err(Error::Configuration(format!(
                            "mu0 of set {idx} has length {}, expected {}",
                            mu0.len(),
                            block.set.count()
                        )));
                    }
                }
            }
        }
        self.check_admission(&self.q0, &self.v0)?;
        // Rank of the differentiated form at the initial state.
        for (idx, block) in self.blocks.iter().enumerate() {
            differentiated_form(&block.set, &self.q0, &self.v0).map_err(|e| match e {
                Error::DegenerateConstraint { message, condition } => {
                    Error::DegenerateConstraint {
                        message: format!("set {idx}: {message}"),
                        condition,
                    }
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Absolute residual check against the admission tolerance.
    pub fn check_admission(&self, q: &DVector<T>, v: &DVector<T>) -> Result<()> {
        for (idx, block) in self.blocks.iter().enumerate() {
            let r = block.set.residual(q, v);
            let worst = r.amax();
            if worst > self.config.admission_tolerance {
                let row = r.iter().enumerate().fold((0usize, T::zero()), |acc, (i, x)| {
                    if x.abs() > acc.1 {
                        (i, x.abs())
                    } else {
                        acc
                    }
                });
                return Err(Error::Admission(format!(
                    "constraint {} of {} set {idx} violated by {:.3e}",
                    row.0 + 1,
                    block.set.family_name(),
                    row.1.as_f64()
                )));
            }
        }
        Ok(())
    }
}

/// Integrator state: configuration, velocity, and the vakonomic
/// multipliers (one vector per block, empty for algebraic models).
#[derive(Debug, Clone)]
pub struct SolverState<T: Real> {
    pub t: T,
    pub q: DVector<T>,
    pub v: DVector<T>,
    pub mus: Vec<DVector<T>>,
}

impl<T: Real> SolverState<T> {
    pub fn initial(scenario: &Scenario<T>) -> Self {
        Self {
            t: T::zero(),
            q: scenario.q0.clone(),
            v: scenario.v0.clone(),
            mus: scenario.initial_mus(),
        }
    }
}

/// Output of the closed equations at one phase point.
#[derive(Debug, Clone)]
pub struct Closure<T: Real> {
    pub accel: DVector<T>,
    /// Per block: algebraic multipliers, or values-and-rates for vakonomic
    /// blocks.
    pub multipliers: Vec<MultiplierState<T>>,
    /// Total reaction covector.
    pub reaction: DVector<T>,
}

impl<T: Real> Closure<T> {
    fn mu_rates(&self) -> Vec<DVector<T>> {
        self.multipliers
            .iter()
            .map(|m| m.rates.clone().unwrap_or_else(|| DVector::zeros(0)))
            .collect()
    }
}

fn velocity_form_of<T: Real>(set: &ConstraintSet<T>) -> VelocityConstraints<T> {
    match set {
        ConstraintSet::Velocity(c) => c.clone(),
        ConstraintSet::Pfaffian(p) => lift_pfaffian_to_velocity(p),
        ConstraintSet::Holonomic(h) => lift_pfaffian_to_velocity(&lift_holonomic_to_pfaffian(h)),
    }
}

/// Solve the saddle system closing the equations of motion at `(q, v)`
/// with the current vakonomic multipliers. Returns the acceleration, the
/// multiplier values or rates per block, and the total reaction covector.
pub fn assemble_closure<T: Real>(
    scenario: &Scenario<T>,
    q: &DVector<T>,
    v: &DVector<T>,
    mus: &[DVector<T>],
) -> Result<Closure<T>> {
    let k = scenario.dim();
    let mass = scenario.system.mass_matrix(q, v);
    let force = applied_force(&scenario.system, &scenario.dissipation, q, v);

    let m_total: usize = scenario.blocks.iter().map(|b| b.set.count()).sum();
    let n = k + m_total;
    let mut lhs = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    lhs.view_mut((0, 0), (k, k)).copy_from(&mass);
    rhs.rows_mut(0, k).copy_from(&force);

    let mut velocity_forms: Vec<Option<VelocityConstraints<T>>> = vec![None; scenario.blocks.len()];
    let mut offset = k;
    for (idx, block) in scenario.blocks.iter().enumerate() {
        let m = block.set.count();
        match block.model {
            ReactionModel::IdealDalembert => {
                if !block.model.accepts(&block.set) {
                    return Err(Error::Configuration(format!(
                        "ideal reactions are undefined for {} constraints",
                        block.set.family_name()
                    )));
                }
                let (a_mat, mut b) = differentiated_form(&block.set, q, v)?;
                if let (Some((alpha, beta)), ConstraintSet::Holonomic(h)) =
                    (scenario.config.baumgarte, &block.set)
                {
                    let two = T::of(2.0);
                    b -= (h.jacobian(q) * v) * (two * alpha);
                    b -= h.residual(q) * (beta * beta);
                }
                let b_rows = block.set.velocity_jacobian(q, v);
                lhs.view_mut((0, offset), (k, m))
                    .copy_from(&(-b_rows.transpose()));
                lhs.view_mut((offset, 0), (m, k)).copy_from(&a_mat);
                rhs.rows_mut(offset, m).copy_from(&b);
            }
            ReactionModel::AppellChetaev => {
                let vc = velocity_form_of(&block.set);
                let df_dv = vc.df_dv(q, v);
                check_full_row_rank(&df_dv, "velocity gradient of the constraints")?;
                let b = -(vc.df_dq(q, v) * v);
                lhs.view_mut((0, offset), (k, m))
                    .copy_from(&(-df_dv.transpose()));
                lhs.view_mut((offset, 0), (m, k)).copy_from(&df_dv);
                rhs.rows_mut(offset, m).copy_from(&b);
                velocity_forms[idx] = Some(vc);
            }
            ReactionModel::Vakonomic => {
                let vc = velocity_form_of(&block.set);
                let mu = &mus[idx];
                if mu.len() != m {
                    return Err(Error::Configuration(format!(
                        "vakonomic multiplier vector of set {idx} has length {}, expected {m}",
                        mu.len()
                    )));
                }
                let df_dv = vc.df_dv(q, v);
                check_full_row_rank(&df_dv, "velocity gradient of the constraints")?;
                let df_dq = vc.df_dq(q, v);
                let dvdq = vc.d2f_dvdq(q, v);
                let dvdv = vc.d2f_dvdv(q, v);
                // inertial-control term couples the acceleration block
                for (a_idx, h_a) in dvdv.iter().enumerate() {
                    let scaled = h_a * mu[a_idx];
                    let mut block_view = lhs.view_mut((0, 0), (k, k));
                    block_view += scaled;
                }
                // configuration part of the reaction goes to the right side
                for a_idx in 0..m {
                    let c_row = df_dq.row(a_idx).transpose() - &dvdq[a_idx] * v;
                    let mut top = rhs.rows_mut(0, k);
                    top += c_row * mu[a_idx];
                }
                // rate unknowns enter with +df_dv^T
                lhs.view_mut((0, offset), (k, m))
                    .copy_from(&df_dv.transpose());
                lhs.view_mut((offset, 0), (m, k)).copy_from(&df_dv);
                rhs.rows_mut(offset, m).copy_from(&(-(&df_dq * v)));
                velocity_forms[idx] = Some(vc);
            }
        }
        offset += m;
    }

    let solution = lhs.clone().lu().solve(&rhs).ok_or_else(|| {
        let svd = lhs.clone().svd(false, false);
        let max_sv = svd.singular_values.max();
        let min_sv = svd.singular_values.min();
        Error::DegenerateConstraint {
            message: "saddle system is singular".into(),
            condition: if min_sv > T::zero() {
                (max_sv / min_sv).as_f64()
            } else {
                f64::INFINITY
            },
        }
    })?;

    let accel = DVector::from(solution.rows(0, k));
    let mut multipliers = Vec::with_capacity(scenario.blocks.len());
    let mut reaction = DVector::zeros(k);
    let mut offset = k;
    for (idx, block) in scenario.blocks.iter().enumerate() {
        let m = block.set.count();
        let values = DVector::from(solution.rows(offset, m));
        match block.model {
            ReactionModel::IdealDalembert | ReactionModel::AppellChetaev => {
                let rows = match block.model {
                    ReactionModel::IdealDalembert => block.set.velocity_jacobian(q, v),
                    _ => velocity_forms[idx]
                        .as_ref()
                        .expect("velocity form prepared above")
                        .df_dv(q, v),
                };
                reaction += rows.transpose() * &values;
                multipliers.push(MultiplierState::algebraic(values));
            }
            ReactionModel::Vakonomic => {
                let vc = velocity_forms[idx]
                    .as_ref()
                    .expect("velocity form prepared above");
                let mu = mus[idx].clone();
                reaction += vakonomic_reaction(vc, q, v, &accel, &mu, &values);
                multipliers.push(MultiplierState::differential(mu, values));
            }
        }
        offset += m;
    }

    Ok(Closure {
        accel,
        multipliers,
        reaction,
    })
}

fn add_scaled<T: Real>(
    state: &SolverState<T>,
    dq: &DVector<T>,
    dv: &DVector<T>,
    dmu: &[DVector<T>],
    scale: T,
) -> SolverState<T> {
    SolverState {
        t: state.t,
        q: &state.q + dq * scale,
        v: &state.v + dv * scale,
        mus: state
            .mus
            .iter()
            .zip(dmu.iter())
            .map(|(m, d)| if m.len() == 0 { m.clone() } else { m + d * scale })
            .collect(),
    }
}

fn least_norm_correction<T: Real>(
    mass: &DMatrix<T>,
    jac: &DMatrix<T>,
    residual: &DVector<T>,
    t: T,
    q: &DVector<T>,
) -> Result<DVector<T>> {
    let minv_jt = mass
        .clone()
        .lu()
        .solve(&jac.transpose())
        .ok_or_else(|| Error::Dynamics {
            message: "singular mass matrix during projection".into(),
            point: q.iter().map(|x| x.as_f64()).collect(),
        })?;
    let gram = jac * &minv_jt;
    let y = gram.lu().solve(residual).ok_or_else(|| Error::StepFailure {
        time: t.as_f64(),
        message: "projection normal system is singular".into(),
    })?;
    Ok(&minv_jt * y)
}

/// Project the configuration onto the holonomic constraint sets and the
/// velocity onto the admissible velocity set, both in the mass-matrix
/// metric.
fn project_state<T: Real>(scenario: &Scenario<T>, state: &mut SolverState<T>) -> Result<()> {
    let cfg = &scenario.config;
    let k = scenario.dim();
    let holonomic: Vec<&crate::constraints::HolonomicConstraints<T>> = scenario
        .blocks
        .iter()
        .filter_map(|b| match &b.set {
            ConstraintSet::Holonomic(h) => Some(h),
            _ => None,
        })
        .collect();

    if !holonomic.is_empty() {
        let m_rows: usize = holonomic.iter().map(|h| h.count()).sum();
        let mut ok = false;
        for _ in 0..cfg.max_projection_iterations {
            let mut r_all = DVector::zeros(m_rows);
            let mut j_all = DMatrix::zeros(m_rows, k);
            let mut off = 0;
            for h in &holonomic {
                let r = h.residual(&state.q);
                let j = h.jacobian(&state.q);
                r_all.rows_mut(off, h.count()).copy_from(&r);
                j_all.view_mut((off, 0), (h.count(), k)).copy_from(&j);
                off += h.count();
            }
            if r_all.amax() <= cfg.projection_tolerance {
                ok = true;
                break;
            }
            let mass = scenario.system.mass_matrix(&state.q, &state.v);
            let delta = least_norm_correction(&mass, &j_all, &r_all, state.t, &state.q)?;
            state.q -= delta;
        }
        if !ok {
            let worst = holonomic
                .iter()
                .map(|h| h.residual(&state.q).amax())
                .fold(T::zero(), |a, b| a.max(b));
            if worst > cfg.projection_tolerance {
                return Err(Error::StepFailure {
                    time: state.t.as_f64(),
                    message: format!(
                        "position projection did not converge (residual {:.3e})",
                        worst.as_f64()
                    ),
                });
            }
        }
    }

    if scenario.blocks.is_empty() {
        return Ok(());
    }

    // Velocity pass: Newton on the stacked velocity-level residuals, exact
    // in one iteration for the velocity-affine families.
    let m_rows: usize = scenario.blocks.iter().map(|b| b.set.count()).sum();
    let mut ok = false;
    for _ in 0..cfg.max_projection_iterations {
        let mut r_all = DVector::zeros(m_rows);
        let mut j_all = DMatrix::zeros(m_rows, k);
        let mut off = 0;
        for block in &scenario.blocks {
            let r = block.set.velocity_residual(&state.q, &state.v);
            let j = block.set.velocity_jacobian(&state.q, &state.v);
            r_all.rows_mut(off, block.set.count()).copy_from(&r);
            j_all
                .view_mut((off, 0), (block.set.count(), k))
                .copy_from(&j);
            off += block.set.count();
        }
        if r_all.amax() <= cfg.projection_tolerance {
            ok = true;
            break;
        }
        let mass = scenario.system.mass_matrix(&state.q, &state.v);
        let delta = least_norm_correction(&mass, &j_all, &r_all, state.t, &state.q)?;
        state.v -= delta;
    }
    if !ok {
        let worst = scenario
            .blocks
            .iter()
            .map(|b| b.set.velocity_residual(&state.q, &state.v).amax())
            .fold(T::zero(), |a, b| a.max(b));
        if worst > cfg.projection_tolerance {
            return Err(Error::StepFailure {
                time: state.t.as_f64(),
                message: format!(
                    "velocity projection did not converge (residual {:.3e})",
                    worst.as_f64()
                ),
            });
        }
    }
    Ok(())
}

/// Advance the state by one integrator step, then stabilize by projection
/// if enabled.
pub fn step<T: Real>(scenario: &Scenario<T>, state: &SolverState<T>) -> Result<SolverState<T>> {
    let h = scenario.config.step;
    let derivative = |s: &SolverState<T>| -> Result<(DVector<T>, DVector<T>, Vec<DVector<T>>)> {
        let c = assemble_closure(scenario, &s.q, &s.v, &s.mus)?;
        Ok((s.v.clone(), c.accel.clone(), c.mu_rates()))
    };

    let mut next = match scenario.config.method {
        Method::ExplicitEuler => {
            let (dq, dv, dmu) = derivative(state)?;
            add_scaled(state, &dq, &dv, &dmu, h)
        }
        Method::RungeKutta4 => {
            let half = h * T::of(0.5);
            let (k1q, k1v, k1m) = derivative(state)?;
            let s2 = add_scaled(state, &k1q, &k1v, &k1m, half);
            let (k2q, k2v, k2m) = derivative(&s2)?;
            let s3 = add_scaled(state, &k2q, &k2v, &k2m, half);
            let (k3q, k3v, k3m) = derivative(&s3)?;
            let s4 = add_scaled(state, &k3q, &k3v, &k3m, h);
            let (k4q, k4v, k4m) = derivative(&s4)?;
            let sixth = h / T::of(6.0);
            let two = T::of(2.0);
            let dq = &k1q + &k2q * two + &k3q * two + &k4q;
            let dv = &k1v + &k2v * two + &k3v * two + &k4v;
            let dmu: Vec<DVector<T>> = k1m
                .iter()
                .zip(k2m.iter())
                .zip(k3m.iter())
                .zip(k4m.iter())
                .map(|(((a, b), c), d)| {
                    if a.len() == 0 {
                        a.clone()
                    } else {
                        a + b * two + c * two + d
                    }
                })
                .collect();
            add_scaled(state, &dq, &dv, &dmu, sixth)
        }
    };
    next.t = state.t + h;

    if scenario.config.projection {
        project_state(scenario, &mut next)?;
    }
    Ok(next)
}

/// Sampled trajectory with multipliers and diagnostics.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord<T: Real> {
    pub times: Vec<T>,
    pub qs: Vec<DVector<T>>,
    pub vs: Vec<DVector<T>>,
    /// Per sample, per constraint block.
    pub multipliers: Vec<Vec<MultiplierState<T>>>,
    /// Per sample: total reaction covector.
    pub reactions: Vec<DVector<T>>,
    pub energies: Vec<T>,
    /// Per sample, per block: max-norm constraint residual.
    pub block_residuals: Vec<Vec<T>>,
    pub reaction_powers: Vec<T>,
}

/// Run summary statistics.
#[derive(Debug, Clone, Copy)]
pub struct Summary<T: Real> {
    pub max_residual: T,
    /// `max |E - E0| / max(1, |E0|)`.
    pub energy_drift: T,
    pub max_reaction_power: T,
    /// `max |P| / (1 + |R| |v|)` over the samples.
    pub max_normalized_power: T,
    pub samples: usize,
}

impl<T: Real> TrajectoryRecord<T> {
    fn new() -> Self {
        Self {
            times: Vec::new(),
            qs: Vec::new(),
            vs: Vec::new(),
            multipliers: Vec::new(),
            reactions: Vec::new(),
            energies: Vec::new(),
            block_residuals: Vec::new(),
            reaction_powers: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn residual_norm(&self, sample: usize) -> T {
        self.block_residuals[sample]
            .iter()
            .fold(T::zero(), |acc, r| acc.max(*r))
    }

    pub fn summary(&self) -> Summary<T> {
        let mut max_residual = T::zero();
        let mut max_power = T::zero();
        let mut max_norm_power = T::zero();
        let e0 = self.energies.first().copied().unwrap_or_else(T::zero);
        let mut drift = T::zero();
        for i in 0..self.len() {
            max_residual = max_residual.max(self.residual_norm(i));
            let p = self.reaction_powers[i].abs();
            max_power = max_power.max(p);
            let bound = T::one() + self.reactions[i].norm() * self.vs[i].norm();
            max_norm_power = max_norm_power.max(p / bound);
            drift = drift.max((self.energies[i] - e0).abs());
        }
        Summary {
            max_residual,
            energy_drift: drift / T::one().max(e0.abs()),
            max_reaction_power: max_power,
            max_normalized_power: max_norm_power,
            samples: self.len(),
        }
    }
}

fn record_sample<T: Real>(
    scenario: &Scenario<T>,
    state: &SolverState<T>,
    record: &mut TrajectoryRecord<T>,
) -> Result<()> {
    let closure = assemble_closure(scenario, &state.q, &state.v, &state.mus)?;
    record.times.push(state.t);
    record.qs.push(state.q.clone());
    record.vs.push(state.v.clone());
    record
        .energies
        .push(scenario.system.energy(&state.q, &state.v));
    record.block_residuals.push(
        scenario
            .blocks
            .iter()
            .map(|b| b.set.residual(&state.q, &state.v).amax())
            .collect(),
    );
    record.reaction_powers.push(closure.reaction.dot(&state.v));
    record.reactions.push(closure.reaction);
    record.multipliers.push(closure.multipliers);
    Ok(())
}

/// Number of whole steps covering `[0, t_end]`.
fn step_count<T: Real>(t_end: T, h: T) -> usize {
    let n = (t_end / h).as_f64().round();
    n.max(1.0) as usize
}

/// Integrate the scenario over its time span, recording states,
/// multipliers and diagnostics at the sample stride.
pub fn simulate<T: Real>(scenario: &Scenario<T>) -> Result<TrajectoryRecord<T>> {
    scenario.validate()?;
    let mut record = TrajectoryRecord::new();
    let mut state = SolverState::initial(scenario);
    record_sample(scenario, &state, &mut record)?;
    let n = step_count(scenario.t_end, scenario.config.step);
    for i in 1..=n {
        state = step(scenario, &state)?;
        if i % scenario.sample_stride == 0 || i == n {
            record_sample(scenario, &state, &mut record)?;
        }
    }
    Ok(record)
}

/// Parametric description `q = phi(y)` of a constraint manifold.
#[derive(Clone)]
pub struct ParametricEmbedding<T: Real> {
    pub full_dim: usize,
    pub reduced_dim: usize,
    pub map: PointFn<T, DVector<T>>,
    /// `k x f` Jacobian `dphi^i/dy^mu`.
    pub jacobian: PointFn<T, DMatrix<T>>,
    /// Per output component `i`: the `f x f` Hessian of `phi^i`.
    pub second_derivative: PointFn<T, Vec<DMatrix<T>>>,
}

impl<T: Real> ParametricEmbedding<T> {
    pub fn new_analytic(
        full_dim: usize,
        reduced_dim: usize,
        map: PointFn<T, DVector<T>>,
        jacobian: PointFn<T, DMatrix<T>>,
        second_derivative: PointFn<T, Vec<DMatrix<T>>>,
    ) -> Self {
        Self {
            full_dim,
            reduced_dim,
            map,
            jacobian,
            second_derivative,
        }
    }

    /// Derivatives by finite differences from the map alone.
    pub fn from_map(full_dim: usize, reduced_dim: usize, map: PointFn<T, DVector<T>>) -> Self {
        let h1 = fd::default_step::<T>();
        let h2 = fd::default_second_step::<T>();
        let m1 = map.clone();
        let jacobian: PointFn<T, DMatrix<T>> =
            Arc::new(move |y| fd::jacobian(&|p: &DVector<T>| m1(p), y, h1));
        let m2 = map.clone();
        let second_derivative: PointFn<T, Vec<DMatrix<T>>> = Arc::new(move |y| {
            (0..full_dim)
                .map(|i| fd::hessian(&|p: &DVector<T>| m2(p)[i], y, h2))
                .collect()
        });
        Self {
            full_dim,
            reduced_dim,
            map,
            jacobian,
            second_derivative,
        }
    }

    /// Column-rank check of the chart at a point.
    pub fn check_at(&self, y: &DVector<T>) -> Result<()> {
        let j = (self.jacobian)(y);
        let svd = j.clone().svd(false, false);
        let max_sv = svd.singular_values.max();
        let min_sv = svd.singular_values.min();
        if min_sv <= T::of(1e-10) * max_sv {
            return Err(Error::ChartDegeneracy(format!(
                "embedding Jacobian is column-rank deficient at y = {:?}",
                y.iter().map(|x| x.as_f64()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

/// Restrict a system `(L, D)` to a parametrized constraint manifold: the
/// result is a complete Lagrangian system over the reduced coordinates.
pub fn reduce_parametric<T: Real>(
    sys: &LagrangianSystem<T>,
    dissipation: &DissipativeForce<T>,
    embedding: &ParametricEmbedding<T>,
) -> (LagrangianSystem<T>, DissipativeForce<T>) {
    let f_dim = embedding.reduced_dim;
    let emb = embedding.clone();
    let sys0 = sys.clone();
    let lagrangian: PhaseFn<T, T> = Arc::new(move |y, ydot| {
        let q = (emb.map)(y);
        let v = (emb.jacobian)(y) * ydot;
        sys0.lagrangian(&q, &v)
    });

    let emb1 = embedding.clone();
    let sys1 = sys.clone();
    let dl_dy: PhaseFn<T, DVector<T>> = Arc::new(move |y, ydot| {
        let q = (emb1.map)(y);
        let jac = (emb1.jacobian)(y);
        let v = &jac * ydot;
        let second = (emb1.second_derivative)(y);
        let dl_dq = sys1.dl_dq(&q, &v);
        let dl_dv = sys1.dl_dv(&q, &v);
        let mut out = jac.transpose() * dl_dq;
        for (i, h_i) in second.iter().enumerate() {
            out += (h_i * ydot) * dl_dv[i];
        }
        out
    });

    let emb2 = embedding.clone();
    let sys2 = sys.clone();
    let dl_dydot: PhaseFn<T, DVector<T>> = Arc::new(move |y, ydot| {
        let q = (emb2.map)(y);
        let jac = (emb2.jacobian)(y);
        let v = &jac * ydot;
        jac.transpose() * sys2.dl_dv(&q, &v)
    });

    let emb3 = embedding.clone();
    let sys3 = sys.clone();
    let mass: PhaseFn<T, DMatrix<T>> = Arc::new(move |y, ydot| {
        let q = (emb3.map)(y);
        let jac = (emb3.jacobian)(y);
        let v = &jac * ydot;
        jac.transpose() * sys3.mass_matrix(&q, &v) * &jac
    });

    let emb4 = embedding.clone();
    let sys4 = sys.clone();
    let dvq: PhaseFn<T, DMatrix<T>> = Arc::new(move |y, ydot| {
        let q = (emb4.map)(y);
        let jac = (emb4.jacobian)(y);
        let v = &jac * ydot;
        let second = (emb4.second_derivative)(y);
        let m_full = sys4.mass_matrix(&q, &v);
        let dvq_full = sys4.dvq(&q, &v);
        let p = sys4.dl_dv(&q, &v);
        let k = emb4.full_dim;
        let f = emb4.reduced_dim;
        // d(J ydot)^j / dy^nu = (H_j ydot)_nu
        let mut dv_dy = DMatrix::zeros(k, f);
        for (j, h_j) in second.iter().enumerate() {
            let row = h_j * ydot;
            for nu in 0..f {
                dv_dy[(j, nu)] = row[nu];
            }
        }
        let inner = &dvq_full * &jac + m_full * &dv_dy;
        let mut out = jac.transpose() * inner;
        for (i, h_i) in second.iter().enumerate() {
            out += h_i * p[i];
        }
        out
    });

    let emb5 = embedding.clone();
    let diss = dissipation.clone();
    let reduced_dissipation = DissipativeForce::from_covector(Arc::new(move |y, ydot| {
        let q = (emb5.map)(y);
        let jac = (emb5.jacobian)(y);
        let v = &jac * ydot;
        jac.transpose() * diss.value(&q, &v)
    }));

    (
        LagrangianSystem::new_analytic(f_dim, lagrangian, dl_dy, dl_dydot, mass, dvq),
        reduced_dissipation,
    )
}

/// One trajectory sample with accelerations, as consumed by the
/// special-solution check.
#[derive(Debug, Clone)]
pub struct ProcedureSample<T: Real> {
    pub t: T,
    pub q: DVector<T>,
    pub v: DVector<T>,
    pub a: DVector<T>,
}

/// Row-by-row defects of the special-solution check.
#[derive(Debug, Clone)]
pub struct ProcedureReport<T: Real> {
    pub times: Vec<T>,
    /// Unconstrained Euler-Lagrange residual covector per sample.
    pub euler_lagrange_residuals: Vec<DVector<T>>,
    pub euler_lagrange_norms: Vec<T>,
    pub constraint_norms: Vec<T>,
    pub max_euler_lagrange: T,
    pub max_constraint: T,
}

impl<T: Real> ProcedureReport<T> {
    /// Whether the trajectory solves the unconstrained problem and satisfies
    /// the constraints simultaneously.
    pub fn is_special_solution(&self, tol: T) -> bool {
        self.max_euler_lagrange <= tol && self.max_constraint <= tol
    }
}

/// Evaluate the zero-reaction equations of motion and the constraint
/// residuals along a supplied trajectory: both defects vanish only on the
/// special solutions of the joint (usually inconsistent) system.
pub fn check_procedure1<T: Real>(
    sys: &LagrangianSystem<T>,
    dissipation: &DissipativeForce<T>,
    samples: &[ProcedureSample<T>],
    sets: &[ConstraintSet<T>],
) -> ProcedureReport<T> {
    let mut report = ProcedureReport {
        times: Vec::with_capacity(samples.len()),
        euler_lagrange_residuals: Vec::with_capacity(samples.len()),
        euler_lagrange_norms: Vec::with_capacity(samples.len()),
        constraint_norms: Vec::with_capacity(samples.len()),
        max_euler_lagrange: T::zero(),
        max_constraint: T::zero(),
    };
    for s in samples {
        let el = crate::dynamics::euler_lagrange_residual(sys, dissipation, &s.q, &s.v, &s.a);
        let el_norm = el.amax();
        let mut c_norm = T::zero();
        for set in sets {
            c_norm = c_norm.max(set.residual(&s.q, &s.v).amax());
        }
        report.max_euler_lagrange = report.max_euler_lagrange.max(el_norm);
        report.max_constraint = report.max_constraint.max(c_norm);
        report.times.push(s.t);
        report.euler_lagrange_residuals.push(el);
        report.euler_lagrange_norms.push(el_norm);
        report.constraint_norms.push(c_norm);
    }
    report
}

/// Rebuild `(q, v, a)` samples from a recorded trajectory by re-solving the
/// closure at every sample.
pub fn samples_with_accelerations<T: Real>(
    scenario: &Scenario<T>,
    record: &TrajectoryRecord<T>,
) -> Result<Vec<ProcedureSample<T>>> {
    let mut out = Vec::with_capacity(record.len());
    for i in 0..record.len() {
        let mus: Vec<DVector<T>> = record.multipliers[i]
            .iter()
            .map(|m| {
                if m.rates.is_some() {
                    m.values.clone()
                } else {
                    DVector::zeros(0)
                }
            })
            .collect();
        let closure = assemble_closure(scenario, &record.qs[i], &record.vs[i], &mus)?;
        out.push(ProcedureSample {
            t: record.times[i],
            q: record.qs[i].clone(),
            v: record.vs[i].clone(),
            a: closure.accel,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::HolonomicConstraints;
    use crate::dynamics::{build_natural_lagrangian, NaturalSystemSpec, ScalarPotential};
    use crate::manifold::MetricField;
    use approx::assert_relative_eq;

    fn circle_constraint() -> ConstraintSet<f64> {
        ConstraintSet::Holonomic(
            HolonomicConstraints::new_analytic(
                2,
                1,
                Arc::new(|q: &DVector<f64>| {
                    DVector::from_vec(vec![q[0] * q[0] + q[1] * q[1] - 1.0])
                }),
                Arc::new(|q: &DVector<f64>| {
                    DMatrix::from_row_slice(1, 2, &[2.0 * q[0], 2.0 * q[1]])
                }),
                Arc::new(|_q| vec![DMatrix::identity(2, 2) * 2.0]),
            )
            .unwrap(),
        )
    }

    fn pendulum_scenario(g: f64, q0: DVector<f64>, v0: DVector<f64>) -> Scenario<f64> {
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
                circle_constraint(),
                ReactionModel::IdealDalembert,
            )],
            q0,
            v0,
            t_end: 1.0,
            config: IntegratorConfig::default(),
            sample_stride: 1,
        }
    }

    #[test]
    fn static_pendulum_closure() {
        let g = 9.81;
        let scenario =
            pendulum_scenario(g, DVector::from_vec(vec![0.0, -1.0]), DVector::zeros(2));
        let c = assemble_closure(&scenario, &scenario.q0, &scenario.v0, &scenario.initial_mus())
            .unwrap();
        assert!(c.accel.amax() < 1e-12);
        assert_relative_eq!(c.multipliers[0].values[0], -g / 2.0, epsilon = 1e-12);
        assert_relative_eq!(c.reaction[1], g, epsilon = 1e-12);
    }

    #[test]
    fn free_particle_on_affine_constraint_moves_straight() {
        let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(3, 3)));
        let c_row = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, -1.0]);
        let c2 = c_row.clone();
        let set = ConstraintSet::Holonomic(
            HolonomicConstraints::new_analytic(
                3,
                1,
                Arc::new(move |q: &DVector<f64>| &c2 * q),
                {
                    let c_row = c_row.clone();
                    Arc::new(move |_q| c_row.clone())
                },
                Arc::new(|_q| vec![DMatrix::zeros(3, 3)]),
            )
            .unwrap(),
        );
        let q0 = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        let v0 = DVector::from_vec(vec![1.0, 1.0, 2.0]);
        let scenario = Scenario {
            system: build_natural_lagrangian(&spec),
            dissipation: DissipativeForce::zero(3),
            blocks: vec![ConstraintBlock::new(set, ReactionModel::IdealDalembert)],
            q0: q0.clone(),
            v0: v0.clone(),
            t_end: 2.0,
            config: IntegratorConfig::default(),
            sample_stride: 100,
        };
        let c = assemble_closure(&scenario, &q0, &v0, &scenario.initial_mus()).unwrap();
        assert!(c.accel.amax() < 1e-13);
        assert!(c.multipliers[0].values.amax() < 1e-13);
        let record = simulate(&scenario).unwrap();
        let last = record.len() - 1;
        let t = record.times[last];
        let expected = &q0 + &v0 * t;
        assert!((record.qs[last].clone() - expected).amax() < 1e-10);
    }

    #[test]
    fn vakonomic_inactive_multipliers_stay_zero() {
        let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(3, 3)));
        let p = crate::constraints::PfaffianConstraints::homogeneous(
            3,
            1,
            Arc::new(|_q: &DVector<f64>| DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.0])),
            Arc::new(|_q| vec![DMatrix::zeros(3, 3)]),
        )
        .unwrap();
        let scenario = Scenario {
            system: build_natural_lagrangian(&spec),
            dissipation: DissipativeForce::zero(3),
            blocks: vec![ConstraintBlock::vakonomic(
                ConstraintSet::Pfaffian(p),
                DVector::zeros(1),
            )],
            q0: DVector::zeros(3),
            v0: DVector::from_vec(vec![1.0, 1.0, 0.5]),
            t_end: 1.0,
            config: IntegratorConfig::default(),
            sample_stride: 1,
        };
        let c = assemble_closure(
            &scenario,
            &scenario.q0,
            &scenario.v0,
            &scenario.initial_mus(),
        )
        .unwrap();
        assert!(c.accel.amax() < 1e-13);
        assert!(c.multipliers[0].rates.as_ref().unwrap().amax() < 1e-13);
    }

    #[test]
    fn unconstrained_drift_is_exact() {
        let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(2, 2)));
        let scenario = Scenario::unconstrained(
            build_natural_lagrangian(&spec),
            DissipativeForce::zero(2),
            DVector::from_vec(vec![0.5, -0.5]),
            DVector::from_vec(vec![1.0, 0.25]),
            1.0,
            IntegratorConfig::default(),
        );
        let record = simulate(&scenario).unwrap();
        let last = record.len() - 1;
        let expected = &scenario.q0 + &scenario.v0 * record.times[last];
        assert!((record.qs[last].clone() - expected).amax() < 1e-12);
    }

    #[test]
    fn pendulum_keeps_constraint_with_projection() {
        let scenario = {
            let mut s = pendulum_scenario(
                9.81,
                DVector::from_vec(vec![0.0, -1.0]),
                DVector::from_vec(vec![2.0, 0.0]),
            );
            s.t_end = 10.0;
            s.sample_stride = 10;
            s
        };
        let record = simulate(&scenario).unwrap();
        let summary = record.summary();
        assert!(summary.max_residual <= 1e-9, "residual {}", summary.max_residual);
        assert!(summary.energy_drift <= 1e-6, "drift {}", summary.energy_drift);
        assert!(
            summary.max_normalized_power <= 1e-9,
            "power {}",
            summary.max_normalized_power
        );
    }

    #[test]
    fn inadmissible_initial_state_is_rejected() {
        let scenario =
            pendulum_scenario(9.81, DVector::from_vec(vec![0.0, -0.5]), DVector::zeros(2));
        assert!(matches!(scenario.validate(), Err(Error::Admission(_))));
    }

    #[test]
    fn reduced_circle_is_uniform_rotation() {
        let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(2, 2)));
        let sys = build_natural_lagrangian(&spec);
        let embedding = ParametricEmbedding::new_analytic(
            2,
            1,
            Arc::new(|y: &DVector<f64>| DVector::from_vec(vec![y[0].cos(), y[0].sin()])),
            Arc::new(|y: &DVector<f64>| {
                DMatrix::from_column_slice(2, 1, &[-y[0].sin(), y[0].cos()])
            }),
            Arc::new(|y: &DVector<f64>| {
                vec![
                    DMatrix::from_element(1, 1, -y[0].cos()),
                    DMatrix::from_element(1, 1, -y[0].sin()),
                ]
            }),
        );
        let (reduced, reduced_d) = reduce_parametric(&sys, &DissipativeForce::zero(2), &embedding);
        let y = DVector::from_vec(vec![0.7]);
        let ydot = DVector::from_vec(vec![1.3]);
        assert_relative_eq!(
            reduced.lagrangian(&y, &ydot),
            0.5 * 1.3 * 1.3,
            epsilon = 1e-12
        );
        let a = crate::dynamics::unconstrained_accel(&reduced, &reduced_d, &y, &ydot).unwrap();
        assert!(a.amax() < 1e-10);
    }

    #[test]
    fn linear_embedding_constant_mass() {
        let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(3, 3)));
        let sys = build_natural_lagrangian(&spec);
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 2.0]);
        let e1 = e.clone();
        let e2 = e.clone();
        let embedding = ParametricEmbedding::new_analytic(
            3,
            2,
            Arc::new(move |y: &DVector<f64>| &e1 * y),
            Arc::new(move |_y| e2.clone()),
            Arc::new(|_y| vec![DMatrix::zeros(2, 2); 3]),
        );
        let (reduced, _) = reduce_parametric(&sys, &DissipativeForce::zero(3), &embedding);
        let m = reduced.mass_matrix(&DVector::zeros(2), &DVector::zeros(2));
        let expected = e.transpose() * &e;
        assert!((m - expected).amax() < 1e-14);
    }

    #[test]
    fn procedure1_straight_line_in_plane() {
        let spec = NaturalSystemSpec::kinetic_only(MetricField::constant(DMatrix::identity(3, 3)));
        let sys = build_natural_lagrangian(&spec);
        let d = DissipativeForce::zero(3);
        let c_row = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
        let c2 = c_row.clone();
        let set = ConstraintSet::Holonomic(
            HolonomicConstraints::new_analytic(
                3,
                1,
                Arc::new(move |q: &DVector<f64>| &c2 * q),
                {
                    let c_row = c_row.clone();
                    Arc::new(move |_q| c_row.clone())
                },
                Arc::new(|_q| vec![DMatrix::zeros(3, 3)]),
            )
            .unwrap(),
        );
        let v = DVector::from_vec(vec![1.0, -0.5, 0.0]);
        let samples: Vec<ProcedureSample<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.1;
                ProcedureSample {
                    t,
                    q: &v * t,
                    v: v.clone(),
                    a: DVector::zeros(3),
                }
            })
            .collect();
        let report = check_procedure1(&sys, &d, &samples, &[set]);
        assert!(report.is_special_solution(1e-10));
    }
}
