//! Homogeneously deformable (affinely rigid) body: translational plus
//! internal degrees of freedom, closed-form balance laws, co-moving
//! representations, and the symmetry-group constraint variants with their
//! structured reaction moments.

pub mod generic;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::solver::{IntegratorConfig, Method};

/// Applied forces on the body: none, a potential `V(r, phi)`, or direct
/// force laws for the total force and the dipole moment.
#[derive(Clone)]
pub enum ForceLaw<T: Real> {
    None,
    Potential {
        value: Arc<dyn Fn(&DVector<T>, &DMatrix<T>) -> T + Send + Sync>,
        grad_r: Arc<dyn Fn(&DVector<T>, &DMatrix<T>) -> DVector<T> + Send + Sync>,
        /// `(k, A)` entry `dV/dphi^k_A`.
        grad_phi: Arc<dyn Fn(&DVector<T>, &DMatrix<T>) -> DMatrix<T> + Send + Sync>,
    },
    Direct {
        force: Arc<dyn Fn(&AffineBodyState<T>) -> DVector<T> + Send + Sync>,
        moment: Arc<dyn Fn(&AffineBodyState<T>) -> DMatrix<T> + Send + Sync>,
    },
}

/// Constant data of the affine body.
#[derive(Clone)]
pub struct AffineBodyModel<T: Real> {
    pub spatial_dim: usize,
    pub mass: T,
    /// Co-moving second-moment (inertia) tensor `J^{KL}`, constant.
    pub inertia: DMatrix<T>,
    /// Spatial metric `g_ij`.
    pub spatial_metric: DMatrix<T>,
    /// Material (reference) metric `eta_AB`.
    pub material_metric: DMatrix<T>,
    pub force: ForceLaw<T>,
}

impl<T: Real> AffineBodyModel<T> {
    /// Euclidean body: identity spatial and material metrics.
    pub fn euclidean(spatial_dim: usize, mass: T, inertia: DMatrix<T>, force: ForceLaw<T>) -> Result<Self> {
        let model = Self {
            spatial_dim,
            mass,
            inertia,
            spatial_metric: DMatrix::identity(spatial_dim, spatial_dim),
            material_metric: DMatrix::identity(spatial_dim, spatial_dim),
            force,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.spatial_dim;
        if n == 0 {
            return Err(Error::Configuration("spatial dimension must be positive".into()));
        }
        if self.mass <= T::zero() {
            return Err(Error::Configuration("total mass must be positive".into()));
        }
        for (name, m) in [
            ("inertia", &self.inertia),
            ("spatial metric", &self.spatial_metric),
            ("material metric", &self.material_metric),
        ] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Configuration(format!("{name} must be {n}x{n}")));
            }
            let scale = T::one().max(m.amax());
            if (m - m.transpose()).amax() > T::of(1e-12) * scale {
                return Err(Error::Configuration(format!("{name} must be symmetric")));
            }
            if m.clone().cholesky().is_none() {
                return Err(Error::Configuration(format!(
                    "{name} must be positive definite"
                )));
            }
        }
        Ok(())
    }

    pub fn inertia_inverse(&self) -> DMatrix<T> {
        self.inertia
            .clone()
            .cholesky()
            .expect("inertia validated positive definite")
            .inverse()
    }

    pub fn spatial_metric_inverse(&self) -> DMatrix<T> {
        self.spatial_metric
            .clone()
            .cholesky()
            .expect("spatial metric validated positive definite")
            .inverse()
    }
}

/// Instantaneous state `(r, rdot, phi, phidot)`.
#[derive(Debug, Clone)]
pub struct AffineBodyState<T: Real> {
    pub r: DVector<T>,
    pub rdot: DVector<T>,
    /// Internal configuration, columns indexed by material labels.
    pub phi: DMatrix<T>,
    pub phidot: DMatrix<T>,
}

impl<T: Real> AffineBodyState<T> {
    pub fn new(r: DVector<T>, rdot: DVector<T>, phi: DMatrix<T>, phidot: DMatrix<T>) -> Self {
        Self {
            r,
            rdot,
            phi,
            phidot,
        }
    }

    /// Rest state at the identity configuration.
    pub fn reference(n: usize) -> Self {
        Self {
            r: DVector::zeros(n),
            rdot: DVector::zeros(n),
            phi: DMatrix::identity(n, n),
            phidot: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn phi_inverse(&self) -> Result<DMatrix<T>> {
        let det = self.phi.determinant();
        if det.abs() <= T::of(1e-12) {
            return Err(Error::State(format!(
                "internal configuration is singular (det = {:.3e})",
                det.as_f64()
            )));
        }
        self.phi
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::State("internal configuration is not invertible".into()))
    }
}

/// Symmetry-group constraint imposed on the internal motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintVariant {
    Unconstrained,
    /// Isometric internal configuration: `g phi^T phi = eta`.
    Rigid,
    /// Volume preserving: `det phi` constant, traceless gyration.
    Isochoric,
    /// Rotations and dilatations: `g phi^T phi = lambda eta`.
    Conformal,
    /// Rotation-free: gyration `g`-symmetric.
    RotationFree,
}

impl ConstraintVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Unconstrained => "unconstrained",
            Self::Rigid => "rigid",
            Self::Isochoric => "isochoric",
            Self::Conformal => "conformal",
            Self::RotationFree => "rotationfree",
        }
    }

    /// Dimension of the reaction-moment space (equals the constraint count).
    pub fn reaction_dim(&self, n: usize) -> usize {
        match self {
            Self::Unconstrained => 0,
            Self::Rigid => n * (n + 1) / 2,
            Self::Isochoric => 1,
            Self::Conformal => n * (n + 1) / 2 - 1,
            Self::RotationFree => n * (n - 1) / 2,
        }
    }
}

pub(crate) fn sym_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for a in 0..n {
        for b in a..n {
            out.push((a, b));
        }
    }
    out
}

pub(crate) fn skew_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in (a + 1)..n {
            out.push((a, b));
        }
    }
    out
}

#[inline]
pub(crate) fn vec_index(n: usize, i: usize, k: usize) -> usize {
    i * n + k
}

pub(crate) fn flatten<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    let n = m.nrows();
    let mut out = DVector::zeros(n * m.ncols());
    for i in 0..n {
        for k in 0..m.ncols() {
            out[vec_index(m.ncols(), i, k)] = m[(i, k)];
        }
    }
    out
}

pub(crate) fn unflatten<T: Real>(v: &DVector<T>, rows: usize, cols: usize) -> DMatrix<T> {
    let mut out = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for k in 0..cols {
            out[(i, k)] = v[vec_index(cols, i, k)];
        }
    }
    out
}

/// Kinetic metric on the internal velocities: `W_{(iK),(jL)} = g_ij J^{KL}`.
pub(crate) fn internal_metric<T: Real>(g: &DMatrix<T>, j: &DMatrix<T>) -> DMatrix<T> {
    let n = g.nrows();
    let mut w = DMatrix::zeros(n * n, n * n);
    for i in 0..n {
        for k in 0..n {
            for jj in 0..n {
                for l in 0..n {
                    w[(vec_index(n, i, k), vec_index(n, jj, l))] = g[(i, jj)] * j[(k, l)];
                }
            }
        }
    }
    w
}

/// Gyration `Omega = phidot phi^{-1}` and its co-moving form
/// `Omega_hat = phi^{-1} phidot`.
pub fn gyration<T: Real>(state: &AffineBodyState<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let phi_inv = state.phi_inverse()?;
    Ok((&state.phidot * &phi_inv, phi_inv * &state.phidot))
}

/// Translational momentum, affine spin `K = phi J phidot^T`, and spin
/// `S = K - K^T`.
pub fn momenta<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
) -> (DVector<T>, DMatrix<T>, DMatrix<T>) {
    let p = &state.rdot * model.mass;
    let k = &state.phi * &model.inertia * state.phidot.transpose();
    let s = &k - k.transpose();
    (p, k, s)
}

/// Translational and internal kinetic energies.
pub fn kinetic_energy<T: Real>(model: &AffineBodyModel<T>, state: &AffineBodyState<T>) -> (T, T) {
    let g = &model.spatial_metric;
    let t_tr = (state.rdot.transpose() * g * &state.rdot)[(0, 0)] * model.mass * T::of(0.5);
    let t_int =
        (g * &state.phidot * &model.inertia * state.phidot.transpose()).trace() * T::of(0.5);
    (t_tr, t_int)
}

/// Analytic `dT_int/dg_{ij} = (phidot J phidot^T)^{ij} / 2`.
pub fn t_int_metric_derivative<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
) -> DMatrix<T> {
    (&state.phidot * &model.inertia * state.phidot.transpose()) * T::of(0.5)
}

/// Potential value at a state, if the model carries one.
pub fn potential_value<T: Real>(model: &AffineBodyModel<T>, state: &AffineBodyState<T>) -> T {
    match &model.force {
        ForceLaw::Potential { value, .. } => value(&state.r, &state.phi),
        _ => T::zero(),
    }
}

/// Total energy `T_tr + T_int + V`.
pub fn total_energy<T: Real>(model: &AffineBodyModel<T>, state: &AffineBodyState<T>) -> T {
    let (t_tr, t_int) = kinetic_energy(model, state);
    t_tr + t_int + potential_value(model, state)
}

/// Force and dipole moment of a potential law:
/// `F^i = -g^{ij} dV/dr^j`, `N^{ij} = -phi^i_A dV/dphi^k_A g^{kj}`.
pub fn potential_forces<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    match &model.force {
        ForceLaw::Potential {
            grad_r, grad_phi, ..
        } => {
            let ginv = model.spatial_metric_inverse();
            let f = -(&ginv * grad_r(&state.r, &state.phi));
            let p = grad_phi(&state.r, &state.phi);
            let n = -(&state.phi * p.transpose() * &ginv);
            Ok((f, n))
        }
        _ => Err(Error::Configuration(
            "model carries no potential force law".into(),
        )),
    }
}

/// Applied `(F, N)` for any force law.
pub fn applied_forces<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let n = model.spatial_dim;
    match &model.force {
        ForceLaw::None => Ok((DVector::zeros(n), DMatrix::zeros(n, n))),
        ForceLaw::Potential { .. } => potential_forces(model, state),
        ForceLaw::Direct { force, moment } => Ok((force(state), moment(state))),
    }
}

/// Accelerations of the unconstrained body: `rddot = F / M` and the unique
/// `phiddot` with `phi J phiddot^T = N`.
pub fn unconstrained_rhs<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
    force: &DVector<T>,
    moment: &DMatrix<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let phi_inv = state.phi_inverse()?;
    let j_inv = model.inertia_inverse();
    let rddot = force / model.mass;
    let phiddot = moment.transpose() * phi_inv.transpose() * j_inv;
    Ok((rddot, phiddot))
}

/// Output of the constrained internal dynamics.
#[derive(Debug, Clone)]
pub struct AffineClosure<T: Real> {
    pub rddot: DVector<T>,
    pub phiddot: DMatrix<T>,
    /// Reaction moment with the variant's mandated symmetry type.
    pub reaction: DMatrix<T>,
    /// Coordinates of the reaction in the variant basis.
    pub multipliers: DVector<T>,
}

/// Basis of the reaction-moment space of a variant (both indices up).
pub fn reaction_basis<T: Real>(
    variant: ConstraintVariant,
    g: &DMatrix<T>,
) -> Vec<DMatrix<T>> {
    let n = g.nrows();
    let ginv = g
        .clone()
        .cholesky()
        .expect("spatial metric positive definite")
        .inverse();
    match variant {
        ConstraintVariant::Unconstrained => Vec::new(),
        ConstraintVariant::Rigid => sym_pairs(n)
            .into_iter()
            .map(|(a, b)| {
                let mut m = DMatrix::zeros(n, n);
                m[(a, b)] = T::one();
                m[(b, a)] = T::one();
                m
            })
            .collect(),
        ConstraintVariant::Isochoric => vec![ginv],
        ConstraintVariant::Conformal => {
            // symmetric g-traceless: project the symmetric basis and keep a
            // maximal independent subset
            let frac = T::one() / T::of(n as f64);
            let candidates: Vec<DMatrix<T>> = sym_pairs(n)
                .into_iter()
                .map(|(a, b)| {
                    let mut m = DMatrix::zeros(n, n);
                    m[(a, b)] = T::one();
                    m[(b, a)] = T::one();
                    let trace = (g * &m).trace();
                    m - &ginv * (trace * frac)
                })
                .collect();
            independent_subset(candidates, n * (n + 1) / 2 - 1)
        }
        ConstraintVariant::RotationFree => skew_pairs(n)
            .into_iter()
            .map(|(a, b)| {
                let mut m = DMatrix::zeros(n, n);
                m[(a, b)] = T::one();
                m[(b, a)] = -T::one();
                m
            })
            .collect(),
    }
}

fn independent_subset<T: Real>(candidates: Vec<DMatrix<T>>, want: usize) -> Vec<DMatrix<T>> {
    let mut picked = Vec::new();
    let mut basis: Vec<DVector<T>> = Vec::new();
    for c in candidates {
        let mut v = flatten(&c);
        let norm0 = v.norm();
        if norm0 <= T::of(1e-14) {
            continue;
        }
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        if v.norm() > T::of(1e-10) * norm0 {
            let nrm = v.norm();
            basis.push(v / nrm);
            picked.push(c);
            if picked.len() == want {
                break;
            }
        }
    }
    picked
}

/// Admission checks of the variant's configuration- and velocity-level
/// constraints.
pub fn check_variant_admission<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
    variant: ConstraintVariant,
    tol: T,
) -> Result<()> {
    let g = &model.spatial_metric;
    let eta = &model.material_metric;
    match variant {
        ConstraintVariant::Unconstrained => Ok(()),
        ConstraintVariant::Rigid => {
            let c = state.phi.transpose() * g * &state.phi - eta;
            if c.amax() > tol {
                return Err(Error::Admission(format!(
                    "isometry constraint violated by {:.3e}",
                    c.amax().as_f64()
                )));
            }
            let s = state.phi.transpose() * g * &state.phidot;
            let sym = &s + s.transpose();
            if sym.amax() > tol {
                return Err(Error::Admission(format!(
                    "isometry velocity constraint violated by {:.3e}",
                    sym.amax().as_f64()
                )));
            }
            Ok(())
        }
        ConstraintVariant::Isochoric => {
            let (omega, _) = gyration(state)?;
            let tr = omega.trace();
            if tr.abs() > tol {
                return Err(Error::Admission(format!(
                    "gyration trace is {:.3e}",
                    tr.as_f64()
                )));
            }
            Ok(())
        }
        ConstraintVariant::Conformal => {
            let x = state.phi.transpose() * g * &state.phi;
            let eta_inv = eta
                .clone()
                .cholesky()
                .expect("material metric positive definite")
                .inverse();
            let lambda = (&eta_inv * &x).trace() / T::of(model.spatial_dim as f64);
            if lambda <= T::zero() {
                return Err(Error::Admission("conformal factor is not positive".into()));
            }
            let c = &x - eta * lambda;
            if c.amax() > tol * T::one().max(x.amax()) {
                return Err(Error::Admission(format!(
                    "conformal constraint violated by {:.3e}",
                    c.amax().as_f64()
                )));
            }
            let s = state.phi.transpose() * g * &state.phidot;
            let sym = &s + s.transpose();
            let rate = (&eta_inv * &sym).trace() / T::of(model.spatial_dim as f64);
            let defect = &sym - eta * rate;
            if defect.amax() > tol * T::one().max(sym.amax()) {
                return Err(Error::Admission(format!(
                    "conformal velocity constraint violated by {:.3e}",
                    defect.amax().as_f64()
                )));
            }
            Ok(())
        }
        ConstraintVariant::RotationFree => {
            let (omega, _) = gyration(state)?;
            let a = g * omega;
            let skew = &a - a.transpose();
            if skew.amax() > tol * T::one().max(a.amax()) {
                return Err(Error::Admission(format!(
                    "rotation-free constraint violated by {:.3e}",
                    skew.amax().as_f64()
                )));
            }
            Ok(())
        }
    }
}

/// Accelerations and the structured reaction moment of a constrained
/// variant: solves the internal dynamics jointly with the once- or
/// twice-differentiated constraint, with the reaction confined to the
/// variant's moment subspace.
pub fn constrained_rhs<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
    variant: ConstraintVariant,
    force: &DVector<T>,
    moment: &DMatrix<T>,
) -> Result<AffineClosure<T>> {
    let n = model.spatial_dim;
    if variant == ConstraintVariant::Unconstrained {
        let (rddot, phiddot) = unconstrained_rhs(model, state, force, moment)?;
        return Ok(AffineClosure {
            rddot,
            phiddot,
            reaction: DMatrix::zeros(n, n),
            multipliers: DVector::zeros(0),
        });
    }

    let g = &model.spatial_metric;
    let eta = &model.material_metric;
    let phi = &state.phi;
    let phidot = &state.phidot;
    let phi_inv = state.phi_inverse()?;
    let phi_j = phi * &model.inertia;
    let basis = reaction_basis::<T>(variant, g);
    let d_r = basis.len();

    let n_aux = usize::from(variant == ConstraintVariant::Conformal);
    let constraint_rows = match variant {
        ConstraintVariant::Rigid | ConstraintVariant::Conformal => sym_pairs(n).len(),
        ConstraintVariant::Isochoric => 1,
        ConstraintVariant::RotationFree => skew_pairs(n).len(),
        ConstraintVariant::Unconstrained => 0,
    };

    let unknowns = n * n + n_aux + d_r;
    let equations = n * n + constraint_rows;
    debug_assert_eq!(unknowns, equations);
    let mut lhs = DMatrix::zeros(equations, unknowns);
    let mut rhs = DVector::zeros(equations);

    // dynamics block: (phi J phiddot^T)_{ij} - sum_s c_s B_s[ij] = N_{ij}
    for i in 0..n {
        for jj in 0..n {
            let row = vec_index(n, i, jj);
            for l in 0..n {
                lhs[(row, vec_index(n, jj, l))] += phi_j[(i, l)];
            }
            for (s, b) in basis.iter().enumerate() {
                lhs[(row, n * n + n_aux + s)] -= b[(i, jj)];
            }
            rhs[row] = moment[(i, jj)];
        }
    }

    // differentiated constraint block
    let g_phi = g * phi;
    match variant {
        ConstraintVariant::Rigid | ConstraintVariant::Conformal => {
            let target = -(phidot.transpose() * g * phidot) * T::of(2.0);
            for (row_idx, (a, b)) in sym_pairs(n).iter().enumerate() {
                let row = n * n + row_idx;
                for k in 0..n {
                    // coefficient of phiddot^k_C in (phi^T g phiddot + phiddot^T g phi)_{AB}
                    lhs[(row, vec_index(n, k, *b))] += g_phi[(k, *a)];
                    lhs[(row, vec_index(n, k, *a))] += g_phi[(k, *b)];
                }
                if variant == ConstraintVariant::Conformal {
                    lhs[(row, n * n)] = -eta[(*a, *b)];
                }
                rhs[row] = target[(*a, *b)];
            }
        }
        ConstraintVariant::Isochoric => {
            let omega = phidot * &phi_inv;
            let row = n * n;
            for k in 0..n {
                for c in 0..n {
                    lhs[(row, vec_index(n, k, c))] = phi_inv[(c, k)];
                }
            }
            rhs[row] = (&omega * &omega).trace();
        }
        ConstraintVariant::RotationFree => {
            let omega = phidot * &phi_inv;
            let g_omega2 = g * &omega * &omega;
            for (row_idx, (i, jj)) in skew_pairs(n).iter().enumerate() {
                let row = n * n + row_idx;
                for k in 0..n {
                    for c in 0..n {
                        lhs[(row, vec_index(n, k, c))] +=
                            g[(*i, k)] * phi_inv[(c, *jj)] - g[(*jj, k)] * phi_inv[(c, *i)];
                    }
                }
                rhs[row] = g_omega2[(*i, *jj)] - g_omega2[(*jj, *i)];
            }
        }
        ConstraintVariant::Unconstrained => unreachable!(),
    }

    let solution = lhs.clone().lu().solve(&rhs).ok_or_else(|| {
        Error::DegenerateConstraint {
            message: format!("{} variant system is singular", variant.name()),
            condition: f64::INFINITY,
        }
    })?;

    let phiddot = unflatten(&solution.rows(0, n * n).into(), n, n);
    let coeffs = DVector::from(solution.rows(n * n + n_aux, d_r));
    let mut reaction = DMatrix::zeros(n, n);
    for (s, b) in basis.iter().enumerate() {
        reaction += b * coeffs[s];
    }
    Ok(AffineClosure {
        rddot: force / model.mass,
        phiddot,
        reaction,
        multipliers: coeffs,
    })
}

/// Recorded affine trajectory.
#[derive(Debug, Clone)]
pub struct AffineRecord<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<AffineBodyState<T>>,
    pub reactions: Vec<DMatrix<T>>,
    pub multipliers: Vec<DVector<T>>,
    pub energies: Vec<T>,
    /// Max-norm residual of the variant constraint.
    pub residuals: Vec<T>,
    /// Reaction power `tr(N_R g Omega)`.
    pub reaction_powers: Vec<T>,
}

impl<T: Real> AffineRecord<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Reaction covector over the flat `(rdot, vec phidot)` velocities.
    pub fn reaction_covector(&self, model: &AffineBodyModel<T>, sample: usize) -> DVector<T> {
        let n = model.spatial_dim;
        let state = &self.states[sample];
        let mut out = DVector::zeros(n + n * n);
        if let Ok(phi_inv) = state.phi_inverse() {
            let r_mat =
                &model.spatial_metric * self.reactions[sample].transpose() * phi_inv.transpose();
            out.rows_mut(n, n * n).copy_from(&flatten(&r_mat));
        }
        out
    }

    /// Run statistics in the same shape as the generic solver's.
    pub fn summary(&self, model: &AffineBodyModel<T>) -> crate::solver::Summary<T> {
        let n = model.spatial_dim;
        let e0 = self.energies.first().copied().unwrap_or_else(T::zero);
        let mut max_residual = T::zero();
        let mut drift = T::zero();
        let mut max_power = T::zero();
        let mut max_norm_power = T::zero();
        for i in 0..self.len() {
            max_residual = max_residual.max(self.residuals[i]);
            drift = drift.max((self.energies[i] - e0).abs());
            let p = self.reaction_powers[i].abs();
            max_power = max_power.max(p);
            let cov = self.reaction_covector(model, i);
            let mut vel = DVector::zeros(n + n * n);
            vel.rows_mut(0, n).copy_from(&self.states[i].rdot);
            vel.rows_mut(n, n * n)
                .copy_from(&flatten(&self.states[i].phidot));
            let bound = T::one() + cov.norm() * vel.norm();
            max_norm_power = max_norm_power.max(p / bound);
        }
        crate::solver::Summary {
            max_residual,
            energy_drift: drift / T::one().max(e0.abs()),
            max_reaction_power: max_power,
            max_normalized_power: max_norm_power,
            samples: self.len(),
        }
    }
}

/// Constraint residual of a variant at a state (configuration level where
/// one exists, velocity level otherwise).
pub fn variant_residual<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
    variant: ConstraintVariant,
    det_ref: T,
) -> Result<T> {
    let g = &model.spatial_metric;
    let eta = &model.material_metric;
    Ok(match variant {
        ConstraintVariant::Unconstrained => T::zero(),
        ConstraintVariant::Rigid => {
            (state.phi.transpose() * g * &state.phi - eta).amax()
        }
        ConstraintVariant::Isochoric => (state.phi.determinant() - det_ref).abs(),
        ConstraintVariant::Conformal => {
            let x = state.phi.transpose() * g * &state.phi;
            let eta_inv = eta
                .clone()
                .cholesky()
                .expect("material metric positive definite")
                .inverse();
            let lambda = (&eta_inv * &x).trace() / T::of(model.spatial_dim as f64);
            (&x - eta * lambda).amax()
        }
        ConstraintVariant::RotationFree => {
            let (omega, _) = gyration(state)?;
            let a = g * omega;
            (&a - a.transpose()).amax()
        }
    })
}

struct VariantProjection<T: Real> {
    variant: ConstraintVariant,
    det_ref: T,
    eta_hat: DMatrix<T>,
    w: DMatrix<T>,
    w_inv: DMatrix<T>,
}

impl<T: Real> VariantProjection<T> {
    fn new(model: &AffineBodyModel<T>, variant: ConstraintVariant, state0: &AffineBodyState<T>) -> Self {
        let n = model.spatial_dim;
        let det_eta = model.material_metric.determinant();
        let eta_hat = &model.material_metric
            / det_eta.powf(T::one() / T::of(n as f64));
        let w = internal_metric(&model.spatial_metric, &model.inertia);
        let w_inv = internal_metric(
            &model.spatial_metric_inverse(),
            &model.inertia_inverse(),
        );
        Self {
            variant,
            det_ref: state0.phi.determinant(),
            eta_hat,
            w,
            w_inv,
        }
    }

    /// Position-level residual rows and Jacobian over `vec(phi)`.
    fn position_system(
        &self,
        model: &AffineBodyModel<T>,
        phi: &DMatrix<T>,
    ) -> Option<(DVector<T>, DMatrix<T>)> {
        let n = model.spatial_dim;
        let g = &model.spatial_metric;
        match self.variant {
            ConstraintVariant::Rigid => {
                let c = phi.transpose() * g * phi - &model.material_metric;
                let pairs = sym_pairs(n);
                let mut r = DVector::zeros(pairs.len());
                let mut jac = DMatrix::zeros(pairs.len(), n * n);
                let g_phi = g * phi;
                for (row, (a, b)) in pairs.iter().enumerate() {
                    r[row] = c[(*a, *b)];
                    for k in 0..n {
                        jac[(row, vec_index(n, k, *b))] += g_phi[(k, *a)];
                        jac[(row, vec_index(n, k, *a))] += g_phi[(k, *b)];
                    }
                }
                Some((r, jac))
            }
            ConstraintVariant::Isochoric => {
                let det = phi.determinant();
                let phi_inv = phi.clone().try_inverse()?;
                let mut jac = DMatrix::zeros(1, n * n);
                for k in 0..n {
                    for c in 0..n {
                        jac[(0, vec_index(n, k, c))] = det * phi_inv[(c, k)];
                    }
                }
                Some((DVector::from_element(1, det - self.det_ref), jac))
            }
            ConstraintVariant::Conformal => {
                let x = phi.transpose() * g * phi;
                let det_x = x.determinant();
                if det_x <= T::zero() {
                    return None;
                }
                let scale = det_x.powf(-T::one() / T::of(n as f64));
                let c_hat = &x * scale - &self.eta_hat;
                let x_inv = x.clone().try_inverse()?;
                let pairs: Vec<(usize, usize)> = sym_pairs(n)
                    .into_iter()
                    .filter(|&(a, b)| !(a == n - 1 && b == n - 1))
                    .collect();
                let mut r = DVector::zeros(pairs.len());
                let mut jac = DMatrix::zeros(pairs.len(), n * n);
                let g_phi = g * phi;
                let frac = T::one() / T::of(n as f64);
                for (row, (a, b)) in pairs.iter().enumerate() {
                    r[row] = c_hat[(*a, *b)];
                    for k in 0..n {
                        for cc in 0..n {
                            // dX_{AB} for the unit direction (k, cc)
                            let mut dx_ab = T::zero();
                            if cc == *a {
                                dx_ab += g_phi[(k, *b)];
                            }
                            if cc == *b {
                                dx_ab += g_phi[(k, *a)];
                            }
                            // tr(X^{-1} dX) for the same direction
                            let mut tr_term = T::zero();
                            for aa in 0..n {
                                // dX_{aa, cc} entry and symmetric partner
                                tr_term += x_inv[(aa, cc)] * g_phi[(k, aa)];
                            }
                            tr_term *= T::of(2.0);
                            let d_chat =
                                scale * (dx_ab - x[(*a, *b)] * frac * tr_term);
                            jac[(row, vec_index(n, k, cc))] += d_chat;
                        }
                    }
                }
                Some((r, jac))
            }
            _ => None,
        }
    }

    /// Velocity-level residual rows and Jacobian over `vec(phidot)`.
    fn velocity_system(
        &self,
        model: &AffineBodyModel<T>,
        phi: &DMatrix<T>,
        phidot: &DMatrix<T>,
    ) -> Option<(DVector<T>, DMatrix<T>)> {
        let n = model.spatial_dim;
        let g = &model.spatial_metric;
        match self.variant {
            ConstraintVariant::Rigid => {
                let s = phi.transpose() * g * phidot;
                let sym = &s + s.transpose();
                let pairs = sym_pairs(n);
                let mut r = DVector::zeros(pairs.len());
                let mut jac = DMatrix::zeros(pairs.len(), n * n);
                let g_phi = g * phi;
                for (row, (a, b)) in pairs.iter().enumerate() {
                    r[row] = sym[(*a, *b)];
                    for k in 0..n {
                        jac[(row, vec_index(n, k, *b))] += g_phi[(k, *a)];
                        jac[(row, vec_index(n, k, *a))] += g_phi[(k, *b)];
                    }
                }
                Some((r, jac))
            }
            ConstraintVariant::Isochoric => {
                let phi_inv = phi.clone().try_inverse()?;
                let tr = (phidot * &phi_inv).trace();
                let mut jac = DMatrix::zeros(1, n * n);
                for k in 0..n {
                    for c in 0..n {
                        jac[(0, vec_index(n, k, c))] = phi_inv[(c, k)];
                    }
                }
                Some((DVector::from_element(1, tr), jac))
            }
            ConstraintVariant::Conformal => {
                let eta = &model.material_metric;
                let eta_inv = eta.clone().try_inverse()?;
                let s = phi.transpose() * g * phidot;
                let sym = &s + s.transpose();
                let rate = (&eta_inv * &sym).trace() / T::of(n as f64);
                let defect = &sym - eta * rate;
                let pairs: Vec<(usize, usize)> = sym_pairs(n)
                    .into_iter()
                    .filter(|&(a, b)| !(a == n - 1 && b == n - 1))
                    .collect();
                let mut r = DVector::zeros(pairs.len());
                let mut jac = DMatrix::zeros(pairs.len(), n * n);
                let g_phi = g * phi;
                let frac = T::one() / T::of(n as f64);
                for (row, (a, b)) in pairs.iter().enumerate() {
                    r[row] = defect[(*a, *b)];
                    for k in 0..n {
                        for cc in 0..n {
                            let mut d_sym = T::zero();
                            if cc == *a {
                                d_sym += g_phi[(k, *b)];
                            }
                            if cc == *b {
                                d_sym += g_phi[(k, *a)];
                            }
                            // d rate = tr(eta^{-1} dSym) / n
                            let mut d_rate = T::zero();
                            for aa in 0..n {
                                d_rate += eta_inv[(aa, cc)] * g_phi[(k, aa)];
                            }
                            d_rate *= T::of(2.0) * frac;
                            jac[(row, vec_index(n, k, cc))] +=
                                d_sym - eta[(*a, *b)] * d_rate;
                        }
                    }
                }
                Some((r, jac))
            }
            ConstraintVariant::RotationFree => {
                let phi_inv = phi.clone().try_inverse()?;
                let a_mat = g * phidot * &phi_inv;
                let pairs = skew_pairs(n);
                let mut r = DVector::zeros(pairs.len());
                let mut jac = DMatrix::zeros(pairs.len(), n * n);
                for (row, (i, jj)) in pairs.iter().enumerate() {
                    r[row] = a_mat[(*i, *jj)] - a_mat[(*jj, *i)];
                    for k in 0..n {
                        for c in 0..n {
                            jac[(row, vec_index(n, k, c))] +=
                                g[(*i, k)] * phi_inv[(c, *jj)] - g[(*jj, k)] * phi_inv[(c, *i)];
                        }
                    }
                }
                Some((r, jac))
            }
            ConstraintVariant::Unconstrained => None,
        }
    }

    fn least_norm<T2>(&self, jac: &DMatrix<T>, r: &DVector<T>) -> Option<DVector<T>> {
        let jt = jac.transpose();
        let winv_jt = &self.w_inv * &jt;
        let gram = jac * &winv_jt;
        let y = gram.lu().solve(r)?;
        let _ = &self.w;
        let _ = std::marker::PhantomData::<T2>;
        Some(winv_jt * y)
    }

    fn project(
        &self,
        model: &AffineBodyModel<T>,
        state: &mut AffineBodyState<T>,
        cfg: &IntegratorConfig<T>,
    ) -> Result<()> {
        if self.variant == ConstraintVariant::Unconstrained {
            return Ok(());
        }
        // position pass
        if !matches!(self.variant, ConstraintVariant::RotationFree) {
            let mut ok = false;
            for _ in 0..cfg.max_projection_iterations {
                let (r, jac) = self
                    .position_system(model, &state.phi)
                    .ok_or_else(|| Error::State("singular configuration in projection".into()))?;
                if r.amax() <= cfg.projection_tolerance {
                    ok = true;
                    break;
                }
                let delta = self.least_norm::<T>(&jac, &r).ok_or_else(|| Error::StepFailure {
                    time: f64::NAN,
                    message: "affine position projection normal system is singular".into(),
                })?;
                state.phi -= unflatten(&delta, model.spatial_dim, model.spatial_dim);
            }
            if !ok {
                let (r, _) = self
                    .position_system(model, &state.phi)
                    .ok_or_else(|| Error::State("singular configuration in projection".into()))?;
                if r.amax() > cfg.projection_tolerance {
                    return Err(Error::StepFailure {
                        time: f64::NAN,
                        message: format!(
                            "affine position projection did not converge (residual {:.3e})",
                            r.amax().as_f64()
                        ),
                    });
                }
            }
        }
        // velocity pass (linear)
        for _ in 0..cfg.max_projection_iterations {
            let (r, jac) = match self.velocity_system(model, &state.phi, &state.phidot) {
                Some(sys) => sys,
                None => return Ok(()),
            };
            if r.amax() <= cfg.projection_tolerance {
                return Ok(());
            }
            let delta = self.least_norm::<T>(&jac, &r).ok_or_else(|| Error::StepFailure {
                time: f64::NAN,
                message: "affine velocity projection normal system is singular".into(),
            })?;
            state.phidot -= unflatten(&delta, model.spatial_dim, model.spatial_dim);
        }
        Ok(())
    }
}

fn state_axpy<T: Real>(
    base: &AffineBodyState<T>,
    d: &(DVector<T>, DVector<T>, DMatrix<T>, DMatrix<T>),
    scale: T,
) -> AffineBodyState<T> {
    AffineBodyState {
        r: &base.r + &d.0 * scale,
        rdot: &base.rdot + &d.1 * scale,
        phi: &base.phi + &d.2 * scale,
        phidot: &base.phidot + &d.3 * scale,
    }
}

type AffineDerivative<T> = (DVector<T>, DVector<T>, DMatrix<T>, DMatrix<T>);

fn affine_derivative<T: Real>(
    model: &AffineBodyModel<T>,
    state: &AffineBodyState<T>,
    variant: ConstraintVariant,
) -> Result<AffineDerivative<T>> {
    let (f, n) = applied_forces(model, state)?;
    let closure = constrained_rhs(model, state, variant, &f, &n)?;
    Ok((
        state.rdot.clone(),
        closure.rddot,
        state.phidot.clone(),
        closure.phiddot,
    ))
}

/// Integrate the affine body under a constraint variant with the same
/// stepping and stabilization conventions as the generic solver.
pub fn simulate_affine<T: Real>(
    model: &AffineBodyModel<T>,
    variant: ConstraintVariant,
    state0: &AffineBodyState<T>,
    config: &IntegratorConfig<T>,
    t_end: T,
    sample_stride: usize,
) -> Result<AffineRecord<T>> {
    model.validate()?;
    config.validate()?;
    if sample_stride == 0 {
        return Err(Error::Configuration("sample stride must be positive".into()));
    }
    check_variant_admission(model, state0, variant, config.admission_tolerance)?;
    let projection = VariantProjection::new(model, variant, state0);

    let mut record = AffineRecord {
        times: Vec::new(),
        states: Vec::new(),
        reactions: Vec::new(),
        multipliers: Vec::new(),
        energies: Vec::new(),
        residuals: Vec::new(),
        reaction_powers: Vec::new(),
    };

    let record_sample = |t: T,
                         state: &AffineBodyState<T>,
                         record: &mut AffineRecord<T>|
     -> Result<()> {
        let (f, n) = applied_forces(model, state)?;
        let closure = constrained_rhs(model, state, variant, &f, &n)?;
        let (omega, _) = gyration(state)?;
        let power = (&closure.reaction * &model.spatial_metric * omega).trace();
        record.times.push(t);
        record.states.push(state.clone());
        record.energies.push(total_energy(model, state));
        record
            .residuals
            .push(variant_residual(model, state, variant, projection.det_ref)?);
        record.reaction_powers.push(power);
        record.reactions.push(closure.reaction);
        record.multipliers.push(closure.multipliers);
        Ok(())
    };

    let mut state = state0.clone();
    let mut t = T::zero();
    record_sample(t, &state, &mut record)?;

    let h = config.step;
    let n_steps = {
        let n = (t_end / h).as_f64().round();
        n.max(1.0) as usize
    };
    for i in 1..=n_steps {
        state = match config.method {
            Method::ExplicitEuler => {
                let d = affine_derivative(model, &state, variant)?;
                state_axpy(&state, &d, h)
            }
            Method::RungeKutta4 => {
                let half = h * T::of(0.5);
                let k1 = affine_derivative(model, &state, variant)?;
                let k2 = affine_derivative(model, &state_axpy(&state, &k1, half), variant)?;
                let k3 = affine_derivative(model, &state_axpy(&state, &k2, half), variant)?;
                let k4 = affine_derivative(model, &state_axpy(&state, &k3, h), variant)?;
                let two = T::of(2.0);
                let sum = (
                    &k1.0 + &k2.0 * two + &k3.0 * two + &k4.0,
                    &k1.1 + &k2.1 * two + &k3.1 * two + &k4.1,
                    &k1.2 + &k2.2 * two + &k3.2 * two + &k4.2,
                    &k1.3 + &k2.3 * two + &k3.3 * two + &k4.3,
                );
                state_axpy(&state, &sum, h / T::of(6.0))
            }
        };
        t = h * T::of(i as f64);
        if config.projection {
            projection.project(model, &mut state, config)?;
        }
        if i % sample_stride == 0 || i == n_steps {
            record_sample(t, &state, &mut record)?;
        }
    }
    Ok(record)
}

/// Defect norms of the balance laws along a uniformly sampled trajectory,
/// measured by central finite differences of the recorded momenta.
#[derive(Debug, Clone, Copy)]
pub struct BalanceReport<T: Real> {
    /// `dp/dt - F`
    pub linear_momentum: T,
    /// `dK/dt - phidot J phidot^T - N`
    pub affine_spin: T,
    /// `dS/dt - (N - N^T)`
    pub spin: T,
    /// `dK/dt - N - 2 dT_int/dg` (analytic metric derivative)
    pub spin_energy: T,
    /// co-moving momentum balance
    pub comoving_momentum: T,
    /// co-moving affine spin balance
    pub comoving_spin: T,
    /// co-moving velocity balance
    pub comoving_velocity: T,
    /// co-moving gyration balance
    pub comoving_gyration: T,
}

/// Evaluate balance-law defects from samples `(t_i, state_i)` with uniform
/// spacing. Reactions, when supplied, are added to the applied moment so
/// the balances hold along constrained motion too.
pub fn balance_report<T: Real>(
    model: &AffineBodyModel<T>,
    samples: &[(T, AffineBodyState<T>)],
    reactions: Option<&[DMatrix<T>]>,
) -> Result<BalanceReport<T>> {
    if samples.len() < 3 {
        return Err(Error::Configuration(
            "balance report needs at least three samples".into(),
        ));
    }
    let mut report = BalanceReport {
        linear_momentum: T::zero(),
        affine_spin: T::zero(),
        spin: T::zero(),
        spin_energy: T::zero(),
        comoving_momentum: T::zero(),
        comoving_spin: T::zero(),
        comoving_velocity: T::zero(),
        comoving_gyration: T::zero(),
    };
    let j_inv = model.inertia_inverse();
    let m = model.mass;

    let quantities = |idx: usize| -> Result<_> {
        let (t, state) = &samples[idx];
        let (p, k, s) = momenta(model, state);
        let (f, mut n_total) = applied_forces(model, state)?;
        if let Some(r) = reactions {
            n_total += &r[idx];
        }
        let phi_inv = state.phi_inverse()?;
        let p_hat = &phi_inv * &p;
        let k_hat = &phi_inv * &k * phi_inv.transpose();
        let v_hat = &phi_inv * &state.rdot;
        let omega_hat = &phi_inv * &state.phidot;
        let f_hat = &phi_inv * &f;
        let n_hat = &phi_inv * &n_total * phi_inv.transpose();
        Ok((
            *t, p, k, s, f, n_total, p_hat, k_hat, v_hat, omega_hat, f_hat, n_hat, state.clone(),
        ))
    };

    for idx in 1..samples.len() - 1 {
        let prev = quantities(idx - 1)?;
        let here = quantities(idx)?;
        let next = quantities(idx + 1)?;
        let dt2 = next.0 - prev.0;
        let inv = T::one() / dt2;

        let dp = (&next.1 - &prev.1) * inv;
        report.linear_momentum = report.linear_momentum.max((dp - &here.4).amax());

        let dk = (&next.2 - &prev.2) * inv;
        let convective =
            &here.12.phidot * &model.inertia * here.12.phidot.transpose();
        report.affine_spin = report
            .affine_spin
            .max((&dk - &convective - &here.5).amax());

        let ds = (&next.3 - &prev.3) * inv;
        let torque = &here.5 - here.5.transpose();
        report.spin = report.spin.max((ds - torque).amax());

        let dt_int_dg = t_int_metric_derivative(model, &here.12);
        report.spin_energy = report
            .spin_energy
            .max((&dk - &here.5 - dt_int_dg * T::of(2.0)).amax());

        // co-moving momentum: dp_hat/dt + K_hat^T J^{-1} p_hat - F_hat = 0
        let dp_hat = (&next.6 - &prev.6) * inv;
        let defect = &dp_hat + here.7.transpose() * &j_inv * &here.6 - &here.10;
        report.comoving_momentum = report.comoving_momentum.max(defect.amax());

        // co-moving affine spin: dK_hat/dt + K_hat J^{-1} K_hat - N_hat = 0
        let dk_hat = (&next.7 - &prev.7) * inv;
        let defect = &dk_hat + &here.7 * &j_inv * &here.7 - &here.11;
        report.comoving_spin = report.comoving_spin.max(defect.amax());

        // co-moving velocity: M dv_hat/dt + M Omega_hat v_hat - F_hat = 0
        let dv_hat = (&next.8 - &prev.8) * inv;
        let defect = dv_hat * m + &here.9 * &here.8 * m - &here.10;
        report.comoving_velocity = report.comoving_velocity.max(defect.amax());

        // co-moving gyration: dOmega_hat/dt J + Omega_hat^2 J - N_hat^T = 0
        let dom_hat = (&next.9 - &prev.9) * inv;
        let defect =
            dom_hat * &model.inertia + &here.9 * &here.9 * &model.inertia - here.11.transpose();
        report.comoving_gyration = report.comoving_gyration.max(defect.amax());
    }
    Ok(report)
}
