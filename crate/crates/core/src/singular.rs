//! Flows with Newtonian singularities `H_μ = H₀ + μV`, `V = −φ/d(q,N)`,
//! integrated with steps that shrink like `d^{3/2}` near `N`, and the
//! near-collision shadowing experiment for the n-center problem.
//!
//! Distances to `N` are measured in the kinetic metric `|v|²_M = vᵀMv`.
//! Point components contribute `−φ_i/|q − a_i|_M` each, so a set of point
//! centers gives the classical n-center potential exactly; chart components
//! contribute through the projection onto the chart.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dls::{admissible, AdmissibilityOptions, Boundary, ChainConfiguration, DiscreteLagrangian, DlsError};
use crate::dynamics::{self, ClassicalHamiltonian, DynamicsError, PhaseState, Potential, ScalarField};
use crate::scatterer::{ChainPoint, Component, Scatterer, ScattererError};
use crate::stats::{loglog_slope, LineFit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SingularError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Scatterer(#[from] ScattererError),
    #[error(transparent)]
    Dls(#[from] DlsError),
    #[error("distance {distance:e} to the singular set is inside the exclusion radius {r_min:e}")]
    Breach { distance: f64, r_min: f64 },
    #[error("collision {index} is not admissible: {reason}")]
    Inadmissible { index: usize, reason: String },
    #[error("relative energy drift {drift:e} exceeds {tol:e}")]
    EnergyDrift { drift: f64, tol: f64 },
    #[error("link {link} never reached the next section")]
    NoCrossing { link: usize },
    #[error("step budget exhausted at t = {t}")]
    StepLimit { t: f64 },
    #[error("shooting Newton did not converge at μ = {mu:e}: residual {residual:e} after {iterations} iterations")]
    Divergence { mu: f64, residual: f64, iterations: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SingularError>;

/// `φ(i, q, μ)` for component `i`, with its gradient in `q`.
pub type CoefficientFn = dyn Fn(usize, &DVector<f64>, f64) -> (f64, DVector<f64>) + Send + Sync;

#[derive(Clone)]
pub enum Coefficient {
    /// One constant `α_i` per component.
    Constant(Vec<f64>),
    Field(Arc<CoefficientFn>),
}

impl std::fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coefficient::Constant(a) => write!(f, "Constant({a:?})"),
            Coefficient::Field(_) => write!(f, "Field"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SingularPerturbation {
    base: ClassicalHamiltonian,
    scatterer: Scatterer,
    mu: f64,
    coefficient: Coefficient,
    guard: f64,
}

/// Distance from `q` to one component, with its gradient.
#[derive(Debug, Clone)]
struct ComponentDistance {
    distance: f64,
    gradient: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SingularEval {
    /// `V(q, μ)`, not multiplied by `μ`.
    pub value: f64,
    pub gradient: DVector<f64>,
    /// `d(q, N)` in the kinetic metric.
    pub distance: f64,
    /// Component realizing `distance`.
    pub component: usize,
    /// `φ` of that component at `q`.
    pub phi: f64,
}

impl SingularPerturbation {
    pub fn new(base: ClassicalHamiltonian, scatterer: Scatterer, mu: f64, coefficient: Coefficient) -> Result<Self> {
        if base.dim() != scatterer.ambient_dim() {
            return Err(SingularError::Invalid("Hamiltonian and scatterer live in different dimensions".into()));
        }
        if scatterer.components().is_empty() {
            return Err(SingularError::Invalid("the singular set is empty".into()));
        }
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(SingularError::Invalid(format!("strength μ = {mu} must be finite and nonnegative")));
        }
        if let Coefficient::Constant(a) = &coefficient {
            if a.len() != scatterer.components().len() {
                return Err(SingularError::Invalid(format!(
                    "{} coefficients for {} components",
                    a.len(),
                    scatterer.components().len()
                )));
            }
            if a.iter().any(|&x| x == 0.0 || !x.is_finite()) {
                return Err(SingularError::Invalid("coefficients must be finite and nonzero".into()));
            }
        }
        Ok(Self { base, scatterer, mu, coefficient, guard: 1e-3 })
    }

    /// Classical n-center problem `½|p|² + μ Σ −α_i/|q − a_i|` in `ℝ^d`.
    pub fn n_center(centers: Vec<(DVector<f64>, f64)>, mu: f64) -> Result<Self> {
        let d = centers.first().map(|c| c.0.len()).ok_or_else(|| SingularError::Invalid("no centers".into()))?;
        let (points, alphas): (Vec<_>, Vec<_>) = centers.into_iter().unzip();
        let sc = Scatterer::point_set(dynamics::AmbientSpace::euclidean(d), points)?;
        Self::new(ClassicalHamiltonian::free(d), sc, mu, Coefficient::Constant(alphas))
    }

    /// Exclusion radius is `μ² · guard`.
    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }

    pub fn base(&self) -> &ClassicalHamiltonian {
        &self.base
    }

    pub fn scatterer(&self) -> &Scatterer {
        &self.scatterer
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn coefficient(&self) -> &Coefficient {
        &self.coefficient
    }

    pub fn r_min(&self) -> f64 {
        self.mu * self.mu * self.guard
    }

    pub fn phi(&self, component: usize, q: &DVector<f64>) -> (f64, DVector<f64>) {
        match &self.coefficient {
            Coefficient::Constant(a) => (a[component], DVector::zeros(q.len())),
            Coefficient::Field(f) => f(component, q, self.mu),
        }
    }

    /// The full Hamiltonian `H₀ + μV` as a classical Hamiltonian.
    pub fn hamiltonian(&self) -> ClassicalHamiltonian {
        if self.mu == 0.0 {
            return self.base.clone();
        }
        let field = TotalPotential { base: self.base.potential_ref().clone(), sp: self.clone() };
        self.base.clone().potential(Potential::Custom(Arc::new(field)))
    }

    fn metric_distance(&self, r: &DVector<f64>) -> ComponentDistance {
        let mr = self.base.mass() * r;
        let distance = r.dot(&mr).sqrt();
        ComponentDistance { distance, gradient: mr / distance }
    }

    fn component_distance(&self, i: usize, q: &DVector<f64>, start: Option<&DVector<f64>>) -> Result<ComponentDistance> {
        let space = self.scatterer.space();
        match &self.scatterer.components()[i] {
            Component::Point(a) => Ok(self.metric_distance(&space.min_image(&(q - a)))),
            Component::Chart(ch) => {
                let m = self.base.mass();
                let mut x = start.cloned().unwrap_or_else(|| DVector::zeros(ch.chart_dim()));
                for _ in 0..60 {
                    let r = space.min_image(&(q - ch.point(&x)));
                    let j = ch.jacobian(&x);
                    let normal = j.transpose() * m * &j;
                    let dx = normal
                        .lu()
                        .solve(&(j.transpose() * m * &r))
                        .ok_or(ScattererError::RankDeficient { coords: x.as_slice().to_vec() })?;
                    x += &dx;
                    if dx.amax() <= 1e-14 * (1.0 + x.amax()) {
                        break;
                    }
                }
                Ok(self.metric_distance(&space.min_image(&(q - ch.point(&x)))))
            }
        }
    }

    fn distances(&self, q: &DVector<f64>) -> Result<Vec<ComponentDistance>> {
        let n = self.scatterer.components().len();
        let warm = if self.scatterer.is_point_set() { None } else { Some(self.scatterer.nearest(q, None)?.base) };
        (0..n)
            .map(|i| {
                let start = warm.as_ref().filter(|b| b.component == i).map(|b| &b.coords);
                self.component_distance(i, q, start)
            })
            .collect()
    }

    /// `d(q, N)` and the nearest component.
    pub fn distance(&self, q: &DVector<f64>) -> Result<(f64, usize)> {
        let ds = self.distances(q)?;
        Ok(ds.iter().enumerate().map(|(i, c)| (c.distance, i)).fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a }))
    }
}

struct TotalPotential {
    base: Potential,
    sp: SingularPerturbation,
}

impl ScalarField for TotalPotential {
    fn value(&self, q: &DVector<f64>) -> Option<f64> {
        let w = self.base.value(q).ok()?;
        let v = eval_singular(&self.sp, q).ok()?;
        Some(w + self.sp.mu * v.value)
    }

    fn gradient(&self, q: &DVector<f64>) -> Option<DVector<f64>> {
        let g = self.base.gradient(q).ok()?;
        let v = eval_singular(&self.sp, q).ok()?;
        Some(g + v.gradient * self.sp.mu)
    }
}

/// `V(q, μ) = −Σ φ_i(q, μ) / d(q, N_i)` and its gradient.
pub fn eval_singular(h: &SingularPerturbation, q: &DVector<f64>) -> Result<SingularEval> {
    if q.len() != h.base.dim() {
        return Err(SingularError::Invalid(format!("configuration has {} entries, expected {}", q.len(), h.base.dim())));
    }
    let ds = h.distances(q)?;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(q.len());
    let (mut distance, mut component, mut phi_near) = (f64::INFINITY, 0, 0.0);
    for (i, c) in ds.iter().enumerate() {
        if !(c.distance > h.r_min()) || c.distance == 0.0 {
            return Err(SingularError::Breach { distance: c.distance, r_min: h.r_min() });
        }
        let (phi, dphi) = h.phi(i, q);
        value -= phi / c.distance;
        gradient += &c.gradient * (phi / (c.distance * c.distance)) - dphi / c.distance;
        if c.distance < distance {
            (distance, component, phi_near) = (c.distance, i, phi);
        }
    }
    Ok(SingularEval { value, gradient, distance, component, phi: phi_near })
}

#[derive(Debug, Clone, Copy)]
pub struct SingularFlowOptions {
    /// Step is `η · min(d/|v|, √(d³/(μ|φ|)))`, capped by `dt_max`.
    pub eta: f64,
    pub dt_max: f64,
    /// Relative to `max(|E₀|, K₀)` with `K₀` the initial kinetic energy.
    pub energy_tol: f64,
    pub max_steps: usize,
}

impl Default for SingularFlowOptions {
    fn default() -> Self {
        Self { eta: 0.01, dt_max: 1e-2, energy_tol: 1e-6, max_steps: 50_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct SingularTrajectory {
    pub states: Vec<PhaseState>,
    pub min_distance: f64,
    pub energy_drift: f64,
}

/// Fourth-order composition of the matched second-order step.
fn composed_step(h: &ClassicalHamiltonian, q: &mut DVector<f64>, p: &mut DVector<f64>, dt: f64, t: f64) -> Result<()> {
    let cbrt2 = 2f64.cbrt();
    let w1 = 1.0 / (2.0 - cbrt2);
    let w0 = -cbrt2 * w1;
    dynamics::step(h, q, p, w1 * dt, t)?;
    dynamics::step(h, q, p, w0 * dt, t + w1 * dt)?;
    dynamics::step(h, q, p, w1 * dt, t + (w0 + w1) * dt)?;
    Ok(())
}

/// Adaptive integrator state shared by the flow and the shooting maps.
struct Integrator<'a> {
    sp: &'a SingularPerturbation,
    h: ClassicalHamiltonian,
    opts: SingularFlowOptions,
    q: DVector<f64>,
    p: DVector<f64>,
    t: f64,
    e0: f64,
    scale: f64,
    distance: f64,
    min_distance: f64,
    drift: f64,
    steps: usize,
}

impl<'a> Integrator<'a> {
    fn new(sp: &'a SingularPerturbation, s0: &PhaseState, opts: SingularFlowOptions) -> Result<Self> {
        let h = sp.hamiltonian();
        let e0 = h.energy(&s0.q, &s0.p)?;
        let v = h.velocity(&s0.q, &s0.p);
        let kinetic = 0.5 * v.dot(&(h.mass() * &v));
        let (distance, _) = sp.distance(&s0.q)?;
        if distance <= sp.r_min() {
            return Err(SingularError::Breach { distance, r_min: sp.r_min() });
        }
        Ok(Self {
            sp,
            h,
            opts,
            q: s0.q.clone(),
            p: s0.p.clone(),
            t: s0.t,
            e0,
            scale: e0.abs().max(kinetic).max(f64::MIN_POSITIVE),
            distance,
            min_distance: distance,
            drift: 0.0,
            steps: 0,
        })
    }

    fn state(&self) -> PhaseState {
        PhaseState { q: self.q.clone(), p: self.p.clone(), t: self.t }
    }

    fn next_dt(&self) -> Result<f64> {
        if self.sp.mu == 0.0 {
            return Ok(self.opts.dt_max);
        }
        let (_, i) = self.sp.distance(&self.q)?;
        let phi = self.sp.phi(i, &self.q).0.abs();
        let v = self.h.velocity(&self.q, &self.p);
        let speed = v.dot(&(self.h.mass() * &v)).sqrt();
        let d = self.distance;
        let crossing = if speed > 0.0 { d / speed } else { f64::INFINITY };
        let fall = (d * d * d / (self.sp.mu * phi)).sqrt();
        Ok(self.opts.dt_max.min(self.opts.eta * crossing.min(fall)))
    }

    /// State after one step of size `dt` from the current one, not committed.
    fn trial(&self, dt: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let (mut q, mut p) = (self.q.clone(), self.p.clone());
        composed_step(&self.h, &mut q, &mut p, dt, self.t).map_err(|e| match e {
            SingularError::Dynamics(DynamicsError::Singular { q }) => {
                let q = DVector::from_vec(q);
                let distance = self.sp.distance(&q).map(|d| d.0).unwrap_or(0.0);
                SingularError::Breach { distance, r_min: self.sp.r_min() }
            }
            other => other,
        })?;
        Ok((q, p))
    }

    fn commit(&mut self, q: DVector<f64>, p: DVector<f64>, dt: f64) -> Result<()> {
        let (distance, _) = self.sp.distance(&q)?;
        if distance <= self.sp.r_min() {
            return Err(SingularError::Breach { distance, r_min: self.sp.r_min() });
        }
        self.q = q;
        self.p = p;
        self.t += dt;
        self.distance = distance;
        self.min_distance = self.min_distance.min(distance);
        let e = self.h.energy(&self.q, &self.p)?;
        self.drift = self.drift.max((e - self.e0).abs() / self.scale);
        self.steps += 1;
        if self.steps > self.opts.max_steps {
            return Err(SingularError::StepLimit { t: self.t });
        }
        Ok(())
    }

    fn step(&mut self, dt: f64) -> Result<()> {
        let (q, p) = self.trial(dt)?;
        self.commit(q, p, dt)
    }

    fn check_drift(&self) -> Result<()> {
        if self.drift > self.opts.energy_tol {
            return Err(SingularError::EnergyDrift { drift: self.drift, tol: self.opts.energy_tol });
        }
        Ok(())
    }
}

/// Integrate `H₀ + μV` from `s0` for `duration` (either sign) and return
/// every accepted step.
pub fn flow_singular(h: &SingularPerturbation, s0: &PhaseState, duration: f64) -> Result<SingularTrajectory> {
    flow_singular_with(h, s0, duration, &SingularFlowOptions::default())
}

pub fn flow_singular_with(
    h: &SingularPerturbation,
    s0: &PhaseState,
    duration: f64,
    opts: &SingularFlowOptions,
) -> Result<SingularTrajectory> {
    if duration == 0.0 || !duration.is_finite() {
        return Err(SingularError::Invalid("duration must be finite and nonzero".into()));
    }
    let mut it = Integrator::new(h, s0, *opts)?;
    let sign = duration.signum();
    let t_end = s0.t + duration;
    let mut states = vec![s0.clone()];
    while (t_end - it.t) * sign > 0.0 {
        let remaining = (t_end - it.t).abs();
        let mut dt = it.next_dt()?;
        if dt >= remaining * (1.0 - 1e-12) {
            dt = remaining;
        }
        it.step(sign * dt)?;
        if dt == remaining {
            it.t = t_end;
        }
        states.push(it.state());
    }
    it.check_drift()?;
    Ok(SingularTrajectory { states, min_distance: it.min_distance, energy_drift: it.drift })
}

#[derive(Debug, Clone, Copy)]
pub struct ShadowExperimentOptions {
    pub flow: SingularFlowOptions,
    /// Residual target in units of `μ`.
    pub tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    /// Central-difference step in units of `μ`.
    pub fd_step: f64,
    pub jump_tol: f64,
    pub angle_tol: f64,
}

impl Default for ShadowExperimentOptions {
    fn default() -> Self {
        Self {
            flow: SingularFlowOptions { eta: 0.01, dt_max: 1e-2, energy_tol: 1e-6, max_steps: 5_000_000 },
            tol: 1e-5,
            max_iterations: 40,
            max_halvings: 30,
            fd_step: 1e-4,
            jump_tol: 1e-6,
            angle_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowRow {
    pub mu: f64,
    /// Largest distance from the orbit to the chain polygon; NaN when not converged.
    pub sup_error: f64,
    pub converged: bool,
    pub min_distance: f64,
    pub iterations: usize,
    /// Shooting residual in section coordinates.
    pub residual: f64,
    pub energy_drift: f64,
    /// Period of the shadowing orbit.
    pub period: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowTable {
    pub rows: Vec<ShadowRow>,
}

impl ShadowTable {
    /// Log-log fit of `sup_error` against `μ` over converged rows.
    pub fn error_slope(&self) -> Option<LineFit> {
        let ok: Vec<&ShadowRow> = self.rows.iter().filter(|r| r.converged).collect();
        if ok.len() < 2 {
            return None;
        }
        let mu: Vec<f64> = ok.iter().map(|r| r.mu).collect();
        let err: Vec<f64> = ok.iter().map(|r| r.sup_error).collect();
        loglog_slope(&mu, &err)
    }
}

/// A Poincaré section through the midpoint of a link, orthogonal to it in
/// the kinetic metric, with `M`-orthonormal transverse frame `T`.
#[derive(Debug, Clone)]
struct Section {
    mid: DVector<f64>,
    dir: DVector<f64>,
    frame: DMatrix<f64>,
}

impl Section {
    fn new(mass: &DMatrix<f64>, from: &DVector<f64>, to: &DVector<f64>) -> Self {
        let e = to - from;
        let dir = &e / e.dot(&(mass * &e)).sqrt();
        let d = e.len();
        let mut basis = vec![dir.clone()];
        for i in 0..d {
            if basis.len() == d {
                break;
            }
            let mut v = DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 });
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&(mass * &v));
                    v.axpy(-c, b, 1.0);
                }
            }
            let n = v.dot(&(mass * &v)).sqrt();
            if n > 1e-6 {
                basis.push(v / n);
            }
        }
        Self { mid: (from + to) * 0.5, dir, frame: DMatrix::from_columns(&basis[1..]) }
    }

    fn signed(&self, mass: &DMatrix<f64>, q: &DVector<f64>) -> f64 {
        (q - &self.mid).dot(&(mass * &self.dir))
    }

    fn coords(&self, mass: &DMatrix<f64>, h: &ClassicalHamiltonian, q: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let k = self.frame.ncols();
        let tm = self.frame.transpose() * mass;
        let v = h.velocity(q, p);
        let mut z = DVector::zeros(2 * k);
        z.rows_mut(0, k).copy_from(&(&tm * (q - &self.mid)));
        z.rows_mut(k, k).copy_from(&(&tm * v));
        z
    }
}

/// Shooting problem for a periodic chain of point centers.
struct Shooting<'a> {
    sp: SingularPerturbation,
    h: ClassicalHamiltonian,
    centers: Vec<DVector<f64>>,
    sections: Vec<Section>,
    energy: f64,
    opts: &'a ShadowExperimentOptions,
}

struct LinkRun {
    end: DVector<f64>,
    time: f64,
    positions: Vec<DVector<f64>>,
    min_distance: f64,
    drift: f64,
}

impl<'a> Shooting<'a> {
    fn k(&self) -> usize {
        self.h.dim() - 1
    }

    fn state(&self, j: usize, z: &DVector<f64>) -> Result<PhaseState> {
        let k = self.k();
        let s = &self.sections[j];
        let q = &s.mid + &s.frame * z.rows(0, k);
        let u = z.rows(k, k).into_owned();
        let w = self.h.potential_at(&q)?;
        let kinetic = self.energy - w;
        let along = 2.0 * kinetic - u.norm_squared();
        if !(along > 0.0) {
            return Err(SingularError::Invalid(format!("section {j}: transverse velocity exceeds the energy shell")));
        }
        let v = &s.frame * u + &s.dir * along.sqrt();
        let p = self.h.momentum(&q, &v);
        Ok(PhaseState::new(q, p))
    }

    /// Flow from section `j` to section `j+1`, after passing center `j+1`.
    fn run(&self, j: usize, z: &DVector<f64>, record: bool) -> Result<LinkRun> {
        let n = self.sections.len();
        let next = (j + 1) % n;
        let target = &self.sections[next];
        let center = &self.centers[next];
        let mass = self.h.mass();
        let s0 = self.state(j, z)?;
        let mut it = Integrator::new(&self.sp, &s0, self.opts.flow)?;
        let length = (center - &self.sections[j].mid).norm() + (&target.mid - center).norm();
        let speed = (2.0 * (self.energy - self.h.potential_at(&s0.q)?)).sqrt();
        let t_max = 20.0 * length / speed;
        let mut positions = if record { vec![s0.q.clone()] } else { Vec::new() };
        let mut passed = false;
        let mut last_gap = (&it.q - center).norm();
        let mut g_prev = target.signed(mass, &it.q);
        loop {
            let dt = it.next_dt()?;
            let (q1, p1) = it.trial(dt)?;
            let g1 = target.signed(mass, &q1);
            if passed && g_prev < 0.0 && g1 >= 0.0 {
                let tau = self.crossing(&it, target, g_prev, g1, dt)?;
                let (q, p) = it.trial(tau)?;
                it.commit(q, p, tau)?;
                if record {
                    positions.push(it.q.clone());
                }
                it.check_drift()?;
                let end = target.coords(mass, &self.h, &it.q, &it.p);
                return Ok(LinkRun { end, time: it.t, positions, min_distance: it.min_distance, drift: it.drift });
            }
            it.commit(q1, p1, dt)?;
            if record {
                positions.push(it.q.clone());
            }
            let gap = (&it.q - center).norm();
            passed |= gap > last_gap;
            last_gap = gap;
            g_prev = g1;
            if it.t > t_max {
                return Err(SingularError::NoCrossing { link: j });
            }
        }
    }

    /// Step length `τ ∈ (0, dt]` that lands on the section, by Illinois regula falsi.
    fn crossing(&self, it: &Integrator, target: &Section, g0: f64, g1: f64, dt: f64) -> Result<f64> {
        let mass = self.h.mass();
        let (mut a, mut b, mut fa, mut fb) = (0.0, dt, g0, g1);
        let mut side = 0;
        for _ in 0..100 {
            let c = (a * fb - b * fa) / (fb - fa);
            let fc = target.signed(mass, &it.trial(c)?.0);
            if fc.abs() <= 1e-15 * (1.0 + target.mid.amax()) || (b - a) <= 1e-16 * dt {
                return Ok(c);
            }
            if fc < 0.0 {
                (a, fa) = (c, fc);
                if side == -1 {
                    fb *= 0.5;
                }
                side = -1;
            } else {
                (b, fb) = (c, fc);
                if side == 1 {
                    fa *= 0.5;
                }
                side = 1;
            }
        }
        Ok(0.5 * (a + b))
    }

    fn residual(&self, z: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let n = z.len();
        (0..n).map(|j| Ok(self.run(j, &z[j], false)?.end - &z[(j + 1) % n])).collect()
    }

    fn jacobian(&self, z: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let n = z.len();
        let m = 2 * self.k();
        let h = self.opts.fd_step * self.sp.mu();
        let mut jac = DMatrix::zeros(n * m, n * m);
        for j in 0..n {
            for c in 0..m {
                let mut zp = z[j].clone();
                let mut zm = z[j].clone();
                zp[c] += h;
                zm[c] -= h;
                let col = (self.run(j, &zp, false)?.end - self.run(j, &zm, false)?.end) / (2.0 * h);
                jac.view_mut((j * m, j * m + c), (m, 1)).copy_from(&col);
            }
            let next = (j + 1) % n;
            for c in 0..m {
                jac[(j * m + c, next * m + c)] -= 1.0;
            }
        }
        Ok(jac)
    }

    /// Incoming asymptote of the two-body hyperbola at center `j+1` whose
    /// deflection turns link `j` into link `j+1`.
    fn predictor(&self, j: usize) -> DVector<f64> {
        let n = self.sections.len();
        let next = (j + 1) % n;
        let mass = self.h.mass();
        let (din, dout) = (&self.sections[j].dir, &self.sections[next].dir);
        let cos = din.dot(&(mass * dout)).clamp(-1.0, 1.0);
        let delta = cos.acos();
        let mut perp = dout - din * cos;
        perp /= perp.dot(&(mass * &perp)).sqrt();
        let kinetic = self.energy - self.h.potential_at(&self.centers[next]).unwrap_or(0.0);
        let phi = self.sp.phi(next, &self.centers[next]).0;
        let b = self.sp.mu() * phi.abs() / (2.0 * kinetic * (0.5 * delta).tan());
        let offset = perp * (-phi.signum() * b);
        let k = self.k();
        let mut z = DVector::zeros(2 * k);
        z.rows_mut(0, k).copy_from(&(self.sections[j].frame.transpose() * mass * offset));
        z
    }
}

fn polygon_distance(q: &DVector<f64>, centers: &[DVector<f64>]) -> f64 {
    let n = centers.len();
    (0..n)
        .map(|j| {
            let (a, b) = (&centers[j], &centers[(j + 1) % n]);
            let e = b - a;
            let s = ((q - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
            (q - a - e * s).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Validate a periodic chain of point centers for shooting at `μ > 0`,
/// returning the ambient centers.
pub fn shadow_centers<D: DiscreteLagrangian + ?Sized>(
    dl: &D,
    template: &SingularPerturbation,
    c: &ChainConfiguration,
    opts: &ShadowExperimentOptions,
) -> Result<Vec<DVector<f64>>> {
    if c.boundary != Boundary::Periodic || c.points.len() < 2 {
        return Err(SingularError::Invalid("shooting needs a periodic chain of at least two collisions".into()));
    }
    if !template.base().is_free() || template.scatterer().space().is_torus() || !template.scatterer().is_point_set() {
        return Err(SingularError::Invalid(
            "shooting is implemented for point centers in Euclidean space with free unperturbed motion".into(),
        ));
    }
    let centers: Vec<DVector<f64>> =
        c.points.iter().map(|p: &ChainPoint| template.scatterer().embed(p)).collect::<std::result::Result<_, _>>()?;
    let attracting = c.points.iter().any(|p| template.phi(p.component, &centers[0]).0 > 0.0);
    let checks = admissible(dl, c, &AdmissibilityOptions { jump_tol: opts.jump_tol, angle_tol: opts.angle_tol, attracting })?;
    if let Some(r) = checks.iter().find(|r| !r.jump_ok) {
        return Err(SingularError::Inadmissible { index: r.index, reason: format!("momentum jump {:e} vanishes", r.jump) });
    }
    if let Some(r) = checks.iter().find(|r| r.straight_reflection) {
        return Err(SingularError::Inadmissible { index: r.index, reason: "straight reflection".into() });
    }
    Ok(centers)
}

/// Shadow a periodic chain of point centers by a periodic orbit of
/// `H₀ + μV`, by multiple shooting between link-midpoint sections.
pub fn shadow_at<D: DiscreteLagrangian + ?Sized>(
    dl: &D,
    template: &SingularPerturbation,
    c: &ChainConfiguration,
    mu: f64,
    opts: &ShadowExperimentOptions,
) -> Result<ShadowRow> {
    if !(mu > 0.0) {
        return Err(SingularError::Invalid("shooting needs μ > 0".into()));
    }
    let centers = shadow_centers(dl, template, c, opts)?;
    let sp = template.with_mu(mu);
    let h = sp.hamiltonian();
    let n = centers.len();
    let sections: Vec<Section> = (0..n).map(|j| Section::new(sp.base().mass(), &centers[j], &centers[(j + 1) % n])).collect();
    let shoot = Shooting { h, sp, centers, sections, energy: dl.energy(), opts };
    let mut z: Vec<DVector<f64>> = (0..n).map(|j| shoot.predictor(j)).collect();
    let flat_norm = |r: &[DVector<f64>]| r.iter().map(|v| v.amax()).fold(0.0, f64::max);
    let mut r = shoot.residual(&z)?;
    let mut norm = flat_norm(&r);
    let tol = opts.tol * mu;
    let mut iterations = 0;
    while norm > tol {
        if iterations >= opts.max_iterations {
            return Err(SingularError::Divergence { mu, residual: norm, iterations });
        }
        iterations += 1;
        let jac = shoot.jacobian(&z)?;
        let rhs = -crate::linalg::BlockTridiagonal::join(&r);
        let step = jac.lu().solve(&rhs).ok_or(SingularError::Divergence { mu, residual: norm, iterations })?;
        let m = 2 * shoot.k();
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<DVector<f64>> = (0..n).map(|j| &z[j] + step.rows(j * m, m) * lambda).collect();
            if let Ok(rt) = shoot.residual(&trial) {
                let nt = flat_norm(&rt);
                if nt < norm {
                    (z, r, norm) = (trial, rt, nt);
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(SingularError::Divergence { mu, residual: norm, iterations });
        }
    }
    let (mut sup_error, mut min_distance, mut drift, mut period) = (0.0f64, f64::INFINITY, 0.0f64, 0.0);
    for j in 0..n {
        let run = shoot.run(j, &z[j], true)?;
        for q in &run.positions {
            sup_error = sup_error.max(polygon_distance(q, &shoot.centers));
        }
        min_distance = min_distance.min(run.min_distance);
        drift = drift.max(run.drift);
        period += run.time;
    }
    Ok(ShadowRow { mu, sup_error, converged: true, min_distance, iterations, residual: norm, energy_drift: drift, period })
}

/// `shadow_at` over a μ-sweep, one thread per value. Newton failures become
/// rows with `converged = false`; admissibility failures abort the sweep.
pub fn shadow_experiment<D: DiscreteLagrangian + ?Sized>(
    dl: &D,
    template: &SingularPerturbation,
    c: &ChainConfiguration,
    mus: &[f64],
    opts: &ShadowExperimentOptions,
) -> Result<ShadowTable> {
    shadow_centers(dl, template, c, opts)?;
    let results: Vec<Result<ShadowRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = mus.iter().map(|&mu| s.spawn(move || shadow_at(dl, template, c, mu, opts))).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(SingularError::Invalid("worker panicked".into())))).collect()
    });
    let rows = results
        .into_iter()
        .zip(mus)
        .map(|(r, &mu)| match r {
            Ok(row) => Ok(row),
            Err(SingularError::Divergence { residual, iterations, .. }) => Ok(ShadowRow {
                mu,
                sup_error: f64::NAN,
                converged: false,
                min_distance: f64::NAN,
                iterations,
                residual,
                energy_drift: f64::NAN,
                period: f64::NAN,
            }),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShadowTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvp::{FreeFlightAction, Symbol};
    use crate::dls::Dls;
    use crate::dynamics::AmbientSpace;
    use crate::linalg::fd_gradient;
    use crate::scatterer::Diagonal;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    #[test]
    fn coulomb_examples() {
        let sp = SingularPerturbation::n_center(vec![(v(&[0.0, 0.0]), 1.0)], 1.0).unwrap();
        let e = eval_singular(&sp, &v(&[2.0, 0.0])).unwrap();
        assert!((e.value + 0.5).abs() < 1e-15);
        assert!((&e.gradient - v(&[0.25, 0.0])).amax() < 1e-15);

        let sp = SingularPerturbation::n_center(vec![(v(&[-1.0, 0.0]), 1.0), (v(&[1.0, 0.0]), 1.0)], 1.0).unwrap();
        assert!(eval_singular(&sp, &v(&[0.0, 0.0])).unwrap().gradient.amax() < 1e-15);
    }

    #[test]
    fn exclusion_radius_is_enforced() {
        let sp = SingularPerturbation::n_center(vec![(v(&[0.0, 0.0]), 1.0)], 1e-2).unwrap().with_guard(10.0);
        assert!((sp.r_min() - 1e-3).abs() < 1e-18);
        assert!(matches!(eval_singular(&sp, &v(&[5e-4, 0.0])), Err(SingularError::Breach { .. })));
        assert!(eval_singular(&sp, &v(&[2e-3, 0.0])).is_ok());
    }

    #[test]
    fn collision_set_of_two_bodies() {
        let (m1, m2, a1, a2) = (1.0, 3.0, 2.0, 0.5);
        let mass = DMatrix::from_diagonal(&v(&[m1, m1, m2, m2]));
        let base = ClassicalHamiltonian::with_mass(mass).unwrap();
        let sc = Scatterer::chart(AmbientSpace::euclidean(4), Diagonal { body_dim: 2 }).unwrap();
        // d(q, Δ)² = m₁m₂/(m₁+m₂) |q₁ − q₂|², so this φ reproduces the pair potential.
        let phi = a1 * a2 * (m1 * m2 / (m1 + m2)).sqrt();
        let sp = SingularPerturbation::new(base, sc, 1.0, Coefficient::Constant(vec![phi])).unwrap();
        let q = v(&[0.3, -0.2, 1.1, 0.4]);
        let e = eval_singular(&sp, &q).unwrap();
        let r = (q.rows(0, 2) - q.rows(2, 2)).norm();
        assert!((e.value + a1 * a2 / r).abs() < 1e-13);
        let oracle = fd_gradient(|x| -a1 * a2 / (x.rows(0, 2) - x.rows(2, 2)).norm(), &q, 1e-5);
        assert!((&e.gradient - oracle).amax() < 1e-8);
    }

    #[test]
    fn field_coefficient_gradient() {
        let field: Arc<CoefficientFn> = Arc::new(|_, q: &DVector<f64>, mu| (1.0 + mu * q[0], v(&[mu, 0.0])));
        let sc = Scatterer::point_set(AmbientSpace::euclidean(2), vec![v(&[0.0, 0.0])]).unwrap();
        let sp = SingularPerturbation::new(ClassicalHamiltonian::free(2), sc, 0.5, Coefficient::Field(field)).unwrap();
        let q = v(&[0.7, -0.4]);
        let g = eval_singular(&sp, &q).unwrap().gradient;
        let oracle = fd_gradient(|x| eval_singular(&sp, x).unwrap().value, &q, 1e-5);
        assert!((g - oracle).amax() < 1e-8);
    }

    #[test]
    fn unperturbed_flow_matches_regular_integrator() {
        let base = ClassicalHamiltonian::free(2).potential(Potential::Harmonic { stiffness: 1.0 });
        let sc = Scatterer::point_set(AmbientSpace::euclidean(2), vec![v(&[5.0, 5.0])]).unwrap();
        let sp = SingularPerturbation::new(base.clone(), sc, 0.0, Coefficient::Constant(vec![1.0])).unwrap();
        let s0 = PhaseState::from_slices(&[1.0, 0.0], &[0.0, 0.7]);
        let a = flow_singular(&sp, &s0, 2.0).unwrap();
        let b = dynamics::flow_segment(&base, &s0, 2.0).unwrap();
        let (ea, eb) = (a.states.last().unwrap(), b.last().unwrap());
        assert!((ea.t - 2.0).abs() < 1e-14);
        assert!((&ea.q - &eb.q).amax() < 1e-7 && (&ea.p - &eb.p).amax() < 1e-7);
    }

    #[test]
    fn attracting_flyby_conserves_energy() {
        let mu = 1e-3;
        let sp = SingularPerturbation::n_center(vec![(v(&[0.0, 0.0]), 1.0)], mu).unwrap();
        let s0 = PhaseState::from_slices(&[-1.0, mu], &[1.0, 0.0]);
        let tr = flow_singular(&sp, &s0, 2.0).unwrap();
        assert!(tr.energy_drift <= 1e-6);
        assert!(tr.min_distance < 2.0 * mu && tr.min_distance > 0.1 * mu);
        // The orbit is deflected by a finite angle.
        let p = &tr.states.last().unwrap().p;
        assert!(p[1].abs() > 0.1);
    }

    #[test]
    fn repelling_head_on_turns_back() {
        let (mu, alpha, v0) = (1e-3, 1.0, 1.0);
        let sp = SingularPerturbation::n_center(vec![(v(&[0.0, 0.0]), -alpha)], mu).unwrap();
        let s0 = PhaseState::from_slices(&[1.0, 0.0], &[-v0, 0.0]);
        let energy = 0.5 * v0 * v0 + mu * alpha;
        let turning = mu * alpha / energy;
        let tr = flow_singular(&sp, &s0, 2.0).unwrap();
        assert!(((tr.min_distance - turning) / turning).abs() < 1e-5);
        assert!(tr.states.last().unwrap().p[0] > 0.0);
        assert!(tr.energy_drift <= 1e-6);
    }

    #[test]
    fn attracting_head_on_breaches() {
        let sp = SingularPerturbation::n_center(vec![(v(&[0.0, 0.0]), 1.0)], 1e-2).unwrap().with_guard(1e2);
        let s0 = PhaseState::from_slices(&[1.0, 0.0], &[-1.0, 0.0]);
        assert!(matches!(flow_singular(&sp, &s0, 2.0), Err(SingularError::Breach { .. })));
    }

    fn square() -> (Vec<(DVector<f64>, f64)>, Dls<FreeFlightAction>) {
        let centers = vec![
            (v(&[0.0, 0.0]), 1.0),
            (v(&[1.0, 0.0]), 1.0),
            (v(&[1.0, 1.0]), 1.0),
            (v(&[0.0, 1.0]), 1.0),
        ];
        let space = AmbientSpace::euclidean(2);
        let sc = Scatterer::point_set(space.clone(), centers.iter().map(|c| c.0.clone()).collect()).unwrap();
        let act = FreeFlightAction::new(&ClassicalHamiltonian::free(2), space, 0.5).unwrap();
        (centers, Dls::new(act, sc).unwrap())
    }

    #[test]
    fn square_code_is_shadowed() {
        let (centers, dl) = square();
        let sp = SingularPerturbation::n_center(centers, 0.0).unwrap();
        let pts = (0..4).map(ChainPoint::point).collect();
        let c = ChainConfiguration::periodic(vec![Symbol::empty(); 4], pts).unwrap();
        let row = shadow_at(&dl, &sp, &c, 1e-3, &ShadowExperimentOptions::default()).unwrap();
        assert!(row.converged);
        assert!(row.sup_error < 10.0 * 1e-3, "{row:?}");
        assert!(row.energy_drift <= 1e-6);
        assert!(row.min_distance > 1e-4 && row.min_distance < 3e-3, "{row:?}");
    }

    #[test]
    fn straight_continuation_is_rejected() {
        let centers = vec![(v(&[0.0, 0.0]), 1.0), (v(&[1.0, 0.0]), 1.0), (v(&[2.0, 0.0]), 1.0)];
        let space = AmbientSpace::euclidean(2);
        let sc = Scatterer::point_set(space.clone(), centers.iter().map(|c| c.0.clone()).collect()).unwrap();
        let dl = Dls::new(FreeFlightAction::new(&ClassicalHamiltonian::free(2), space, 0.5).unwrap(), sc).unwrap();
        let sp = SingularPerturbation::n_center(centers, 0.0).unwrap();
        let pts = [0, 1, 2, 1].into_iter().map(ChainPoint::point).collect();
        let c = ChainConfiguration::periodic(vec![Symbol::empty(); 4], pts).unwrap();
        let err = shadow_experiment(&dl, &sp, &c, &[1e-3], &ShadowExperimentOptions::default()).unwrap_err();
        assert!(matches!(err, SingularError::Inadmissible { index: 1, .. }), "{err:?}");
    }
}
