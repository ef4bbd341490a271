//! Classical Hamiltonians `H(q,p) = ½‖p − w(q)‖² + W(q)` on flat ambient
//! spaces, symplectic flow integration and Maupertuis action quadrature.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("configuration {q:?} lies on the singular set of the potential")]
    Singular { q: Vec<f64> },
    #[error("energy {energy} does not exceed the potential {potential} at sample {sample}")]
    OutsideDomain { sample: usize, energy: f64, potential: f64 },
    #[error("energy drift {drift:e} exceeds tolerance {tol:e}")]
    EnergyDrift { drift: f64, tol: f64 },
    #[error("implicit midpoint iteration failed to converge at t = {t}")]
    ImplicitStep { t: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// Geometry of the configuration space: Euclidean `ℝ^d` or a flat torus.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceKind {
    Euclidean,
    FlatTorus { periods: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbientSpace {
    dim: usize,
    kind: SpaceKind,
}

impl AmbientSpace {
    pub fn euclidean(dim: usize) -> Self {
        Self { dim, kind: SpaceKind::Euclidean }
    }

    pub fn torus(periods: Vec<f64>) -> Result<Self> {
        if periods.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(DynamicsError::Invalid("torus periods must be positive".into()));
        }
        Ok(Self { dim: periods.len(), kind: SpaceKind::FlatTorus { periods } })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &SpaceKind {
        &self.kind
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.kind, SpaceKind::FlatTorus { .. })
    }

    /// Representative of `q` in the fundamental domain `[0, L)`.
    pub fn wrap(&self, q: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            SpaceKind::Euclidean => q.clone(),
            SpaceKind::FlatTorus { periods } => {
                DVector::from_iterator(self.dim, q.iter().zip(periods).map(|(x, l)| x.rem_euclid(*l)))
            }
        }
    }

    /// Lift of an integer winding (rotation vector) to an ambient translation.
    pub fn winding_offset(&self, winding: &[i64]) -> DVector<f64> {
        match &self.kind {
            SpaceKind::Euclidean => DVector::zeros(self.dim),
            SpaceKind::FlatTorus { periods } => DVector::from_iterator(
                self.dim,
                periods.iter().enumerate().map(|(i, l)| winding.get(i).copied().unwrap_or(0) as f64 * l),
            ),
        }
    }

    /// Displacement from `from` to `to` along the class labelled by `winding`.
    /// On a torus the winding is kept explicit instead of reducing to the
    /// shortest representative.
    pub fn displacement(&self, from: &DVector<f64>, to: &DVector<f64>, winding: &[i64]) -> DVector<f64> {
        to + self.winding_offset(winding) - from
    }

    /// Shortest displacement (minimal image on the torus).
    pub fn min_image(&self, delta: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            SpaceKind::Euclidean => delta.clone(),
            SpaceKind::FlatTorus { periods } => DVector::from_iterator(
                self.dim,
                delta.iter().zip(periods).map(|(x, l)| x - l * (x / l).round()),
            ),
        }
    }

    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.min_image(&(b - a)).norm()
    }
}

/// A scalar field with gradient, used for user-supplied potentials.
pub trait ScalarField: Send + Sync {
    fn value(&self, q: &DVector<f64>) -> Option<f64>;
    fn gradient(&self, q: &DVector<f64>) -> Option<DVector<f64>>;
}

/// A covector field `w(q)` with its Jacobian `J[j][i] = ∂w_j/∂q_i`.
pub trait CovectorField: Send + Sync {
    fn value(&self, q: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Clone)]
pub enum Potential {
    Zero,
    Constant(f64),
    /// `½ k |q|²`
    Harmonic { stiffness: f64 },
    /// `−Σ α_i / |q − a_i|`
    Coulomb { centers: Vec<(DVector<f64>, f64)> },
    Custom(Arc<dyn ScalarField>),
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Potential::Zero => write!(f, "Zero"),
            Potential::Constant(c) => write!(f, "Constant({c})"),
            Potential::Harmonic { stiffness } => write!(f, "Harmonic({stiffness})"),
            Potential::Coulomb { centers } => write!(f, "Coulomb({} centers)", centers.len()),
            Potential::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Potential {
    pub fn value(&self, q: &DVector<f64>) -> Result<f64> {
        match self {
            Potential::Zero => Ok(0.0),
            Potential::Constant(c) => Ok(*c),
            Potential::Harmonic { stiffness } => Ok(0.5 * stiffness * q.norm_squared()),
            Potential::Coulomb { centers } => {
                let mut v = 0.0;
                for (a, alpha) in centers {
                    let r = (q - a).norm();
                    if r == 0.0 {
                        return Err(DynamicsError::Singular { q: q.iter().copied().collect() });
                    }
                    v -= alpha / r;
                }
                Ok(v)
            }
            Potential::Custom(field) => {
                field.value(q).ok_or_else(|| DynamicsError::Singular { q: q.iter().copied().collect() })
            }
        }
    }

    pub fn gradient(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Potential::Zero | Potential::Constant(_) => Ok(DVector::zeros(q.len())),
            Potential::Harmonic { stiffness } => Ok(q * *stiffness),
            Potential::Coulomb { centers } => {
                let mut g = DVector::zeros(q.len());
                for (a, alpha) in centers {
                    let d = q - a;
                    let r = d.norm();
                    if r == 0.0 {
                        return Err(DynamicsError::Singular { q: q.iter().copied().collect() });
                    }
                    g += d * (alpha / (r * r * r));
                }
                Ok(g)
            }
            Potential::Custom(field) => {
                field.gradient(q).ok_or_else(|| DynamicsError::Singular { q: q.iter().copied().collect() })
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Potential::Zero | Potential::Constant(_))
    }
}

#[derive(Clone)]
pub enum Magnetic {
    None,
    /// `w = (b/2)(−q₂, q₁, 0, …)`, a uniform field in the first coordinate plane.
    Uniform { strength: f64 },
    Custom(Arc<dyn CovectorField>),
}

impl fmt::Debug for Magnetic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Magnetic::None => write!(f, "None"),
            Magnetic::Uniform { strength } => write!(f, "Uniform({strength})"),
            Magnetic::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Magnetic {
    pub fn value(&self, q: &DVector<f64>) -> DVector<f64> {
        match self {
            Magnetic::None => DVector::zeros(q.len()),
            Magnetic::Uniform { strength } => {
                let mut w = DVector::zeros(q.len());
                w[0] = -0.5 * strength * q[1];
                w[1] = 0.5 * strength * q[0];
                w
            }
            Magnetic::Custom(field) => field.value(q),
        }
    }

    pub fn jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = q.len();
        match self {
            Magnetic::None => DMatrix::zeros(n, n),
            Magnetic::Uniform { strength } => {
                let mut j = DMatrix::zeros(n, n);
                j[(0, 1)] = -0.5 * strength;
                j[(1, 0)] = 0.5 * strength;
                j
            }
            Magnetic::Custom(field) => field.jacobian(q),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Magnetic::None)
    }
}

/// `H(q,p) = ½ (p − w)ᵀ M⁻¹ (p − w) + W(q)` with a constant mass matrix `M`.
#[derive(Debug, Clone)]
pub struct ClassicalHamiltonian {
    mass: DMatrix<f64>,
    mass_inv: DMatrix<f64>,
    potential: Potential,
    magnetic: Magnetic,
}

impl ClassicalHamiltonian {
    pub fn free(dim: usize) -> Self {
        Self {
            mass: DMatrix::identity(dim, dim),
            mass_inv: DMatrix::identity(dim, dim),
            potential: Potential::Zero,
            magnetic: Magnetic::None,
        }
    }

    pub fn with_mass(mass: DMatrix<f64>) -> Result<Self> {
        if !mass.is_square() || (&mass - mass.transpose()).amax() > 1e-14 * mass.amax() {
            return Err(DynamicsError::Invalid("mass matrix must be symmetric".into()));
        }
        let chol = mass
            .clone()
            .cholesky()
            .ok_or_else(|| DynamicsError::Invalid("mass matrix must be positive definite".into()))?;
        let mass_inv = chol.inverse();
        Ok(Self { mass, mass_inv, potential: Potential::Zero, magnetic: Magnetic::None })
    }

    pub fn diagonal_mass(masses: &[f64]) -> Result<Self> {
        Self::with_mass(DMatrix::from_diagonal(&DVector::from_row_slice(masses)))
    }

    pub fn potential(mut self, potential: Potential) -> Self {
        self.potential = potential;
        self
    }

    pub fn magnetic(mut self, magnetic: Magnetic) -> Self {
        self.magnetic = magnetic;
        self
    }

    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    pub fn mass_inv(&self) -> &DMatrix<f64> {
        &self.mass_inv
    }

    pub fn potential_ref(&self) -> &Potential {
        &self.potential
    }

    pub fn magnetic_ref(&self) -> &Magnetic {
        &self.magnetic
    }

    /// No forces at all: straight lines at constant speed.
    pub fn is_free(&self) -> bool {
        self.potential.is_constant() && self.magnetic.is_none()
    }

    pub fn potential_at(&self, q: &DVector<f64>) -> Result<f64> {
        self.potential.value(q)
    }

    /// Kinetic (velocity) norm `√(vᵀ M v)`.
    pub fn velocity_norm(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.mass * v)).max(0.0).sqrt()
    }

    /// Dual norm on covectors `√(pᵀ M⁻¹ p)`.
    pub fn covector_norm(&self, p: &DVector<f64>) -> f64 {
        p.dot(&(&self.mass_inv * p)).max(0.0).sqrt()
    }

    pub fn velocity(&self, q: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        &self.mass_inv * (p - self.magnetic.value(q))
    }

    /// Momentum of a velocity: `p = M v + w(q)`.
    pub fn momentum(&self, q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.mass * v + self.magnetic.value(q)
    }

    pub fn energy(&self, q: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
        let u = p - self.magnetic.value(q);
        Ok(0.5 * u.dot(&(&self.mass_inv * &u)) + self.potential.value(q)?)
    }

    /// Hamiltonian vector field `(q̇, ṗ)`.
    pub fn vector_field(&self, q: &DVector<f64>, p: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let v = self.velocity(q, p);
        let mut pdot = -self.potential.gradient(q)?;
        if !self.magnetic.is_none() {
            pdot += self.magnetic.jacobian(q).transpose() * &v;
        }
        Ok((v, pdot))
    }
}

/// Evaluate `H` at a phase state.
pub fn eval_energy(h: &ClassicalHamiltonian, s: &PhaseState) -> Result<f64> {
    h.energy(&s.q, &s.p)
}

/// `true` iff `W(q) < E` (strict).
pub fn in_domain(h: &ClassicalHamiltonian, q: &DVector<f64>, energy: f64) -> bool {
    matches!(h.potential_at(q), Ok(w) if w < energy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
    pub t: f64,
}

impl PhaseState {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Self {
        Self { q, p, t: 0.0 }
    }

    pub fn from_slices(q: &[f64], p: &[f64]) -> Self {
        Self::new(DVector::from_row_slice(q), DVector::from_row_slice(p))
    }
}

/// Fixed-step policy for [`flow_segment`].
#[derive(Debug, Clone, Copy)]
pub struct StepPolicy {
    pub steps_per_unit_time: f64,
    /// Relative energy drift bound, scaled by `max(1, |H|)`.
    pub energy_tol: f64,
    /// Endpoint error target for step doubling, scaled by `max(1, |q|)`.
    pub position_tol: f64,
    pub max_doublings: u32,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self { steps_per_unit_time: 1e4, energy_tol: 1e-8, position_tol: 5e-9, max_doublings: 6 }
    }
}

/// One step of Störmer–Verlet (kick–drift–kick); valid for `w ≡ 0`.
pub fn verlet_step(h: &ClassicalHamiltonian, q: &mut DVector<f64>, p: &mut DVector<f64>, dt: f64) -> Result<()> {
    let g = h.potential.gradient(q)?;
    p.axpy(-0.5 * dt, &g, 1.0);
    let v = &h.mass_inv * &*p;
    q.axpy(dt, &v, 1.0);
    let g = h.potential.gradient(q)?;
    p.axpy(-0.5 * dt, &g, 1.0);
    Ok(())
}

/// One step of the implicit midpoint rule, solved by fixed-point iteration.
pub fn midpoint_step(
    h: &ClassicalHamiltonian,
    q: &mut DVector<f64>,
    p: &mut DVector<f64>,
    dt: f64,
    t: f64,
) -> Result<()> {
    let (q0, p0) = (q.clone(), p.clone());
    let (mut q1, mut p1) = {
        let (v, f) = h.vector_field(&q0, &p0)?;
        (&q0 + &v * dt, &p0 + &f * dt)
    };
    for _ in 0..100 {
        let qm = (&q0 + &q1) * 0.5;
        let pm = (&p0 + &p1) * 0.5;
        let (v, f) = h.vector_field(&qm, &pm)?;
        let qn = &q0 + &v * dt;
        let pn = &p0 + &f * dt;
        let change = (&qn - &q1).amax().max((&pn - &p1).amax());
        q1 = qn;
        p1 = pn;
        if change <= 1e-15 * (1.0 + q1.amax().max(p1.amax())) {
            *q = q1;
            *p = p1;
            return Ok(());
        }
    }
    Err(DynamicsError::ImplicitStep { t })
}

/// Advance `(q, p)` by `duration` using exactly `steps` equal steps of the
/// scheme matched to the Hamiltonian (Verlet when `w ≡ 0`, else midpoint).
pub fn advance(h: &ClassicalHamiltonian, s: &PhaseState, duration: f64, steps: usize) -> Result<PhaseState> {
    let mut q = s.q.clone();
    let mut p = s.p.clone();
    let dt = duration / steps as f64;
    for i in 0..steps {
        step(h, &mut q, &mut p, dt, s.t + i as f64 * dt)?;
    }
    Ok(PhaseState { q, p, t: s.t + duration })
}

/// One step of the scheme matched to the Hamiltonian.
pub fn step(h: &ClassicalHamiltonian, q: &mut DVector<f64>, p: &mut DVector<f64>, dt: f64, t: f64) -> Result<()> {
    if h.magnetic.is_none() {
        verlet_step(h, q, p, dt)
    } else {
        midpoint_step(h, q, p, dt, t)
    }
}

/// Number of equal steps the default policy uses over `duration`.
pub fn step_count(policy: &StepPolicy, duration: f64) -> usize {
    ((duration.abs() * policy.steps_per_unit_time).ceil() as usize).max(1)
}

/// Integrate from `s0` for `duration` and return every sample. Negative
/// durations integrate backwards in time.
pub fn flow_segment(h: &ClassicalHamiltonian, s0: &PhaseState, duration: f64) -> Result<Vec<PhaseState>> {
    flow_segment_with(h, s0, duration, &StepPolicy::default())
}

pub fn flow_segment_with(
    h: &ClassicalHamiltonian,
    s0: &PhaseState,
    duration: f64,
    policy: &StepPolicy,
) -> Result<Vec<PhaseState>> {
    if duration == 0.0 || !duration.is_finite() {
        return Err(DynamicsError::Invalid("duration must be finite and nonzero".into()));
    }
    let e0 = h.energy(&s0.q, &s0.p)?;
    let tol = policy.energy_tol * e0.abs().max(1.0);
    // Step doubling: the scheme is second order, so the difference between
    // the N- and 2N-step endpoints estimates 3/4 of the N-step error.
    let mut n = step_count(policy, duration);
    let mut coarse = advance(h, s0, duration, n)?;
    let mut doublings = 0;
    loop {
        let fine = advance(h, s0, duration, 2 * n)?;
        let err = 4.0 / 3.0 * (&fine.q - &coarse.q).amax().max((&fine.p - &coarse.p).amax());
        let drift = (h.energy(&coarse.q, &coarse.p)? - e0).abs();
        let scale = fine.q.amax().max(fine.p.amax()).max(1.0);
        n *= 2;
        doublings += 1;
        if (err <= policy.position_tol * scale && drift <= tol) || doublings > policy.max_doublings {
            break;
        }
        coarse = fine;
    }
    let dt = duration / n as f64;
    let mut out = Vec::with_capacity(n + 1);
    out.push(s0.clone());
    let mut q = s0.q.clone();
    let mut p = s0.p.clone();
    for i in 0..n {
        step(h, &mut q, &mut p, dt, s0.t + i as f64 * dt)?;
        out.push(PhaseState { q: q.clone(), p: p.clone(), t: s0.t + (i + 1) as f64 * dt });
    }
    let e1 = h.energy(&q, &p)?;
    if (e1 - e0).abs() > tol {
        return Err(DynamicsError::EnergyDrift { drift: (e1 - e0).abs(), tol });
    }
    Ok(out)
}

/// Maupertuis action `∫ √(2(E − W)) ‖q̇‖ + ⟨w, q̇⟩` of a sampled curve, by the
/// midpoint rule on each chord.
pub fn jacobi_action(h: &ClassicalHamiltonian, curve: &[DVector<f64>], energy: f64) -> Result<f64> {
    for (i, q) in curve.iter().enumerate() {
        let w = h.potential_at(q)?;
        if w >= energy {
            return Err(DynamicsError::OutsideDomain { sample: i, energy, potential: w });
        }
    }
    let mut total = 0.0;
    for pair in curve.windows(2) {
        let dq = &pair[1] - &pair[0];
        let mid = (&pair[0] + &pair[1]) * 0.5;
        let w = h.potential_at(&mid)?;
        let speed = (2.0 * (energy - w)).max(0.0).sqrt();
        total += speed * h.velocity_norm(&dq) + h.magnetic.value(&mid).dot(&dq);
    }
    Ok(total)
}

/// `∫ p dq` along a sampled trajectory (trapezoid in the momenta).
pub fn maupertuis_integral(traj: &[PhaseState]) -> f64 {
    traj.windows(2).map(|w| ((&w[0].p + &w[1].p) * 0.5).dot(&(&w[1].q - &w[0].q))).sum()
}

pub fn positions(traj: &[PhaseState]) -> Vec<DVector<f64>> {
    traj.iter().map(|s| s.q.clone()).collect()
}
