//! Configuration-space geometry: kinematical metrics, Christoffel symbols,
//! covariant accelerations, and the mass-weighted metric of multiparticle
//! systems.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd;
use crate::scalar::Real;

/// Evaluator from a configuration point.
pub type PointFn<T, Out> = Arc<dyn Fn(&DVector<T>) -> Out + Send + Sync>;

/// Where derivative data comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance<T> {
    Analytic,
    FiniteDifference { step: T },
}

/// A configuration manifold: dimension plus coordinate labels used in
/// diagnostics.
#[derive(Debug, Clone)]
pub struct ConfigurationSpace {
    dim: usize,
    labels: Vec<String>,
}

impl ConfigurationSpace {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Configuration(
                "configuration space dimension must be at least 1".into(),
            ));
        }
        let labels = (1..=dim).map(|i| format!("q{i}")).collect();
        Ok(Self { dim, labels })
    }

    pub fn with_labels(dim: usize, labels: Vec<String>) -> Result<Self> {
        if labels.len() != dim {
            return Err(Error::Configuration(format!(
                "{} labels supplied for dimension {dim}",
                labels.len()
            )));
        }
        let mut space = Self::new(dim)?;
        space.labels = labels;
        Ok(space)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Position-dependent metric `G(q)` with its coordinate derivatives.
///
/// The value is checked for symmetry and positive definiteness at every
/// evaluated point; a failed check is reported, never repaired.
#[derive(Clone)]
pub struct MetricField<T: Real> {
    dim: usize,
    eval: PointFn<T, DMatrix<T>>,
    deriv: Option<PointFn<T, Vec<DMatrix<T>>>>,
    provenance: Provenance<T>,
}

fn point_f64<T: Real>(q: &DVector<T>) -> Vec<f64> {
    q.iter().map(|x| x.as_f64()).collect()
}

impl<T: Real> MetricField<T> {
    /// Metric from a black-box evaluator; derivatives by central finite
    /// differences with the default step base.
    pub fn new(dim: usize, eval: PointFn<T, DMatrix<T>>) -> Self {
        Self {
            dim,
            eval,
            deriv: None,
            provenance: Provenance::FiniteDifference {
                step: fd::default_step(),
            },
        }
    }

    /// Metric with analytic coordinate derivatives: element `c` of the
    /// derivative evaluator holds `dG_ab/dq^c`.
    pub fn new_analytic(
        dim: usize,
        eval: PointFn<T, DMatrix<T>>,
        deriv: PointFn<T, Vec<DMatrix<T>>>,
    ) -> Self {
        Self {
            dim,
            eval,
            deriv: Some(deriv),
            provenance: Provenance::Analytic,
        }
    }

    /// Constant metric.
    pub fn constant(matrix: DMatrix<T>) -> Self {
        let dim = matrix.nrows();
        let zeros = vec![DMatrix::zeros(dim, dim); dim];
        Self::new_analytic(
            dim,
            Arc::new(move |_q| matrix.clone()),
            Arc::new(move |_q| zeros.clone()),
        )
    }

    pub fn with_step(mut self, step: T) -> Result<Self> {
        if step <= T::zero() {
            return Err(Error::Configuration(
                "finite-difference step must be positive".into(),
            ));
        }
        if self.deriv.is_none() {
            self.provenance = Provenance::FiniteDifference { step };
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance<T> {
        self.provenance
    }

    /// `G(q)`, validated symmetric positive definite.
    pub fn value(&self, q: &DVector<T>) -> Result<DMatrix<T>> {
        let g = (self.eval)(q);
        if g.nrows() != self.dim || g.ncols() != self.dim {
            return Err(Error::Configuration(format!(
                "metric evaluator returned a {}x{} matrix for dimension {}",
                g.nrows(),
                g.ncols(),
                self.dim
            )));
        }
        let scale = T::one().max(g.amax());
        let asym = (&g - g.transpose()).amax();
        if asym > T::of(1e-12) * scale {
            return Err(Error::Geometry {
                message: format!("metric is not symmetric (defect {:.3e})", asym.as_f64()),
                point: point_f64(q),
            });
        }
        if g.clone().cholesky().is_none() {
            return Err(Error::Geometry {
                message: "metric is not positive definite".into(),
                point: point_f64(q),
            });
        }
        Ok(g)
    }

    /// `dG_ab/dq^c`, indexed by `c`.
    pub fn derivative(&self, q: &DVector<T>) -> Vec<DMatrix<T>> {
        match &self.deriv {
            Some(d) => d(q),
            None => {
                let step = match self.provenance {
                    Provenance::FiniteDifference { step } => step,
                    Provenance::Analytic => fd::default_step(),
                };
                let eval = self.eval.clone();
                fd::matrix_derivative(&move |p: &DVector<T>| eval(p), q, step)
            }
        }
    }

    /// Inverse metric `G^{ab}(q)` through the SPD factorization.
    pub fn inverse(&self, q: &DVector<T>) -> Result<DMatrix<T>> {
        let g = self.value(q)?;
        g.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| Error::Geometry {
            message: "metric factorization failed".into(),
            point: point_f64(q),
        })
    }

    /// Christoffel symbols of `G` at `q`: element `a` of the result is the
    /// symmetric matrix over the lower index pair.
    pub fn christoffel(&self, q: &DVector<T>) -> Result<Vec<DMatrix<T>>> {
        let k = self.dim;
        let ginv = self.inverse(q)?;
        let dg = self.derivative(q);
        let half = T::of(0.5);
        let mut gamma = vec![DMatrix::zeros(k, k); k];
        for b in 0..k {
            for c in 0..=b {
                // lowered symbol over i: G_{ib,c} + G_{ic,b} - G_{bc,i}
                let mut lowered = DVector::zeros(k);
                for i in 0..k {
                    lowered[i] = dg[c][(i, b)] + dg[b][(i, c)] - dg[i][(b, c)];
                }
                let raised = &ginv * lowered * half;
                for a in 0..k {
                    gamma[a][(b, c)] = raised[a];
                    gamma[a][(c, b)] = raised[a];
                }
            }
        }
        Ok(gamma)
    }
}

/// Covariant acceleration `a^a + Gamma^a_{bc} v^b v^c`.
pub fn covariant_acceleration<T: Real>(
    metric: &MetricField<T>,
    q: &DVector<T>,
    v: &DVector<T>,
    a: &DVector<T>,
) -> Result<DVector<T>> {
    let gamma = metric.christoffel(q)?;
    let mut out = a.clone();
    for (idx, g_a) in gamma.iter().enumerate() {
        out[idx] += (v.transpose() * g_a * v)[(0, 0)];
    }
    Ok(out)
}

/// A system of mass points with an embedding of the generalized chart into
/// their Cartesian positions.
#[derive(Clone)]
pub struct ParticleSystemSpec<T: Real> {
    pub masses: Vec<T>,
    pub spatial_dim: usize,
    pub config_dim: usize,
    /// Positions of all particles at `q`.
    pub positions: PointFn<T, Vec<DVector<T>>>,
    /// Position Jacobians `dr_A/dq`, one `spatial_dim x config_dim` matrix
    /// per particle.
    pub jacobians: PointFn<T, Vec<DMatrix<T>>>,
}

impl<T: Real> ParticleSystemSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.masses.is_empty() {
            return Err(Error::Configuration("particle system has no particles".into()));
        }
        if self.masses.iter().any(|m| *m <= T::zero()) {
            return Err(Error::Configuration("particle masses must be positive".into()));
        }
        if self.spatial_dim == 0 || self.config_dim == 0 {
            return Err(Error::Configuration("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Check evaluator shapes at a sample point.
    pub fn check_at(&self, q: &DVector<T>) -> Result<()> {
        self.validate()?;
        let jacs = (self.jacobians)(q);
        if jacs.len() != self.masses.len() {
            return Err(Error::Configuration(format!(
                "{} Jacobians for {} particles",
                jacs.len(),
                self.masses.len()
            )));
        }
        for (idx, j) in jacs.iter().enumerate() {
            if j.nrows() != self.spatial_dim || j.ncols() != self.config_dim {
                return Err(Error::Configuration(format!(
                    "Jacobian of particle {idx} is {}x{}, expected {}x{}",
                    j.nrows(),
                    j.ncols(),
                    self.spatial_dim,
                    self.config_dim
                )));
            }
        }
        Ok(())
    }

    /// Kinetic energy through the embedding, `1/2 sum m_A |J_A v|^2`.
    pub fn kinetic_energy(&self, q: &DVector<T>, v: &DVector<T>) -> T {
        let jacs = (self.jacobians)(q);
        let mut t = T::zero();
        for (m, j) in self.masses.iter().zip(jacs.iter()) {
            let vel = j * v;
            t += *m * vel.dot(&vel);
        }
        t * T::of(0.5)
    }
}

/// Mass-weighted kinematical metric `G_ab = sum_A m_A (dr_A/dq^a) . (dr_A/dq^b)`.
pub fn build_particle_metric<T: Real>(spec: &ParticleSystemSpec<T>) -> Result<MetricField<T>> {
    spec.validate()?;
    let masses = spec.masses.clone();
    let jacobians = spec.jacobians.clone();
    let dim = spec.config_dim;
    let eval = Arc::new(move |q: &DVector<T>| {
        let jacs = jacobians(q);
        let mut g = DMatrix::zeros(dim, dim);
        for (m, j) in masses.iter().zip(jacs.iter()) {
            g += j.transpose() * j * *m;
        }
        g
    });
    Ok(MetricField::new(dim, eval))
}
