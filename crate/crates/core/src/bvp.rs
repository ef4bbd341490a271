//! Fixed-energy two-point connections: the collision orbits between two
//! configuration points, their Maupertuis action, boundary momenta, twist
//! and conjugacy data.
//!
//! Straight-line (free flight) orbits on Euclidean space and flat tori are
//! computed in closed form. Everything else goes through a shooting Newton
//! solve on the numerical flow, with unknowns `(v₋, τ)` and equations
//! `q(τ) = q₊`, `H = E`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{self, AmbientSpace, ClassicalHamiltonian, DynamicsError, PhaseState, StepPolicy};
use crate::linalg::fd_jacobian;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvpError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("endpoint is outside the domain of possible motion (W = {potential} ≥ E = {energy})")]
    EnergyInfeasible { potential: f64, energy: f64 },
    #[error("endpoints coincide along the chosen label; no orbit of positive length")]
    ZeroLength,
    #[error("shooting Newton did not converge: residual {residual:e} after {iterations} iterations")]
    Divergence { residual: f64, iterations: usize },
    #[error("shooting Jacobian is singular (smallest singular value {sigma:e}); endpoints are conjugate")]
    Conjugate { sigma: f64 },
    #[error("no initial guess supplied for the shooting solver")]
    MissingGuess,
}

pub type Result<T> = std::result::Result<T, BvpError>;

/// Symbol labelling one branch of a multivalued two-point action: a torus
/// winding, a reflection word, revolution counts, ...
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Symbol(pub Vec<i64>);

impl Symbol {
    pub fn new(v: impl Into<Vec<i64>>) -> Self {
        Symbol(v.into())
    }

    pub fn empty() -> Self {
        Symbol(Vec::new())
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }
}

impl std::fmt::Display for Symbol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|k| k.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    FreeFlight,
    Shooting,
}

/// Initial data for the shooting solver.
#[derive(Debug, Clone, Default)]
pub struct ConnectGuess {
    pub velocity: Option<DVector<f64>>,
    pub duration: Option<f64>,
}

impl ConnectGuess {
    pub fn new(velocity: DVector<f64>, duration: f64) -> Self {
        Self { velocity: Some(velocity), duration: Some(duration) }
    }
}

#[derive(Debug, Clone)]
pub struct CollisionOrbit {
    pub q_minus: DVector<f64>,
    /// Final point in the universal cover (the label's lift applied).
    pub q_plus: DVector<f64>,
    pub energy: f64,
    pub action: f64,
    pub duration: f64,
    pub p_minus: DVector<f64>,
    pub p_plus: DVector<f64>,
    pub path: Vec<DVector<f64>>,
    pub label: Symbol,
    pub backend: Backend,
    /// Step count used by the shooting backend (zero for closed forms).
    pub steps: usize,
}

impl CollisionOrbit {
    pub fn v_minus(&self, h: &ClassicalHamiltonian) -> DVector<f64> {
        h.velocity(&self.q_minus, &self.p_minus)
    }

    pub fn v_plus(&self, h: &ClassicalHamiltonian) -> DVector<f64> {
        h.velocity(&self.q_plus, &self.p_plus)
    }

    pub fn guess(&self, h: &ClassicalHamiltonian) -> ConnectGuess {
        ConnectGuess::new(self.v_minus(h), self.duration)
    }

    /// The same orbit traversed backwards (valid when `w ≡ 0`).
    pub fn reversed(&self) -> CollisionOrbit {
        let mut path = self.path.clone();
        path.reverse();
        CollisionOrbit {
            q_minus: self.q_plus.clone(),
            q_plus: self.q_minus.clone(),
            energy: self.energy,
            action: self.action,
            duration: self.duration,
            p_minus: -&self.p_plus,
            p_plus: -&self.p_minus,
            path,
            label: Symbol(self.label.0.iter().map(|k| -k).collect()),
            backend: self.backend,
            steps: self.steps,
        }
    }
}

/// Tolerances of the shooting solver.
#[derive(Debug, Clone, Copy)]
pub struct ShootingOptions {
    pub residual_tol: f64,
    pub max_iterations: usize,
    /// Central-difference step, relative to the problem scale.
    pub fd_step: f64,
    pub policy: StepPolicy,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self { residual_tol: 1e-10, max_iterations: 60, fd_step: 1e-6, policy: StepPolicy::default() }
    }
}

/// Find the energy-`E` orbit from `q_minus` to `q_plus` in the class `label`.
pub fn connect(
    h: &ClassicalHamiltonian,
    space: &AmbientSpace,
    q_minus: &DVector<f64>,
    q_plus: &DVector<f64>,
    energy: f64,
    guess: &ConnectGuess,
    label: &Symbol,
) -> Result<CollisionOrbit> {
    connect_with(h, space, q_minus, q_plus, energy, guess, label, &ShootingOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn connect_with(
    h: &ClassicalHamiltonian,
    space: &AmbientSpace,
    q_minus: &DVector<f64>,
    q_plus: &DVector<f64>,
    energy: f64,
    guess: &ConnectGuess,
    label: &Symbol,
    opts: &ShootingOptions,
) -> Result<CollisionOrbit> {
    for q in [q_minus, q_plus] {
        let w = h.potential_at(q)?;
        if w >= energy {
            return Err(BvpError::EnergyInfeasible { potential: w, energy });
        }
    }
    let target = q_minus + space.displacement(q_minus, q_plus, label.as_slice());
    if h.is_free() {
        free_flight(h, q_minus, &target, energy, label)
    } else {
        shoot(h, q_minus, &target, energy, guess, label, opts)
    }
}

fn free_flight(
    h: &ClassicalHamiltonian,
    q_minus: &DVector<f64>,
    target: &DVector<f64>,
    energy: f64,
    label: &Symbol,
) -> Result<CollisionOrbit> {
    let w = h.potential_at(q_minus)?;
    let speed = (2.0 * (energy - w)).sqrt();
    let d = target - q_minus;
    let len = h.velocity_norm(&d);
    if len == 0.0 {
        return Err(BvpError::ZeroLength);
    }
    let v = &d * (speed / len);
    let p = h.momentum(q_minus, &v);
    let path = (0..=32).map(|i| q_minus + &d * (i as f64 / 32.0)).collect();
    Ok(CollisionOrbit {
        q_minus: q_minus.clone(),
        q_plus: target.clone(),
        energy,
        action: speed * len,
        duration: len / speed,
        p_minus: p.clone(),
        p_plus: p,
        path,
        label: label.clone(),
        backend: Backend::FreeFlight,
        steps: 0,
    })
}

/// Shooting residual `(q(τ) − target, H − E)` for a fixed step count.
fn shooting_map(
    h: &ClassicalHamiltonian,
    q_minus: &DVector<f64>,
    target: &DVector<f64>,
    energy: f64,
    z: &DVector<f64>,
    steps: usize,
) -> std::result::Result<DVector<f64>, DynamicsError> {
    let d = q_minus.len();
    let v = z.rows(0, d).into_owned();
    let tau = z[d];
    let p = h.momentum(q_minus, &v);
    let end = dynamics::advance(h, &PhaseState::new(q_minus.clone(), p.clone()), tau, steps)?;
    let mut r = DVector::zeros(d + 1);
    r.rows_mut(0, d).copy_from(&(end.q - target));
    r[d] = h.energy(q_minus, &p)? - energy;
    Ok(r)
}

fn shooting_jacobian(
    h: &ClassicalHamiltonian,
    q_minus: &DVector<f64>,
    target: &DVector<f64>,
    energy: f64,
    z: &DVector<f64>,
    steps: usize,
    step: f64,
) -> DMatrix<f64> {
    fd_jacobian(
        |y| shooting_map(h, q_minus, target, energy, y, steps).unwrap_or_else(|_| DVector::from_element(y.len(), f64::NAN)),
        z,
        step,
    )
}

fn shoot(
    h: &ClassicalHamiltonian,
    q_minus: &DVector<f64>,
    target: &DVector<f64>,
    energy: f64,
    guess: &ConnectGuess,
    label: &Symbol,
    opts: &ShootingOptions,
) -> Result<CollisionOrbit> {
    let d = q_minus.len();
    let (v0, tau0) = match (&guess.velocity, guess.duration) {
        (Some(v), Some(t)) => (v.clone(), t),
        _ => return Err(BvpError::MissingGuess),
    };
    let steps = dynamics::step_count(&opts.policy, tau0 * 1.5).max(2000);
    let mut z = DVector::zeros(d + 1);
    z.rows_mut(0, d).copy_from(&v0);
    z[d] = tau0;
    let scale = 1.0 + v0.amax().max(tau0.abs());
    let fd = opts.fd_step * scale;
    let mut r = shooting_map(h, q_minus, target, energy, &z, steps)?;
    let mut iterations = 0;
    while r.amax() > opts.residual_tol {
        if iterations >= opts.max_iterations {
            return Err(BvpError::Divergence { residual: r.amax(), iterations });
        }
        iterations += 1;
        let jac = shooting_jacobian(h, q_minus, target, energy, &z, steps, fd);
        let svd = jac.clone().svd(true, true);
        let sigma = svd.singular_values.min();
        if !(sigma > 1e-14 * svd.singular_values.max()) {
            return Err(BvpError::Conjugate { sigma });
        }
        let dz = jac.lu().solve(&(-&r)).ok_or(BvpError::Conjugate { sigma })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &z + &dz * lambda;
            if let Ok(rt) = shooting_map(h, q_minus, target, energy, &trial, steps) {
                if rt.amax() < r.amax() || rt.amax() <= opts.residual_tol {
                    z = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(BvpError::Divergence { residual: r.amax(), iterations });
        }
    }
    let tau = z[d];
    let v = z.rows(0, d).into_owned();
    let p_minus = h.momentum(q_minus, &v);
    let s0 = PhaseState::new(q_minus.clone(), p_minus.clone());
    let mut q = s0.q.clone();
    let mut p = s0.p.clone();
    let dt = tau / steps as f64;
    let mut path = Vec::with_capacity(steps + 1);
    path.push(q.clone());
    for i in 0..steps {
        let end = dynamics::advance(h, &PhaseState { q: q.clone(), p: p.clone(), t: i as f64 * dt }, dt, 1)?;
        q = end.q;
        p = end.p;
        path.push(q.clone());
    }
    let action = dynamics::jacobi_action(h, &path, energy)?;
    Ok(CollisionOrbit {
        q_minus: q_minus.clone(),
        q_plus: target.clone(),
        energy,
        action,
        duration: tau,
        p_minus,
        p_plus: p,
        path,
        label: label.clone(),
        backend: Backend::Shooting,
        steps,
    })
}

/// Re-solve a nearby connection, warm-started from `orbit`. Endpoints are
/// given in the universal cover, so the label's winding is not reapplied.
pub fn reconnect(
    h: &ClassicalHamiltonian,
    orbit: &CollisionOrbit,
    q_minus: &DVector<f64>,
    q_plus_lift: &DVector<f64>,
) -> Result<CollisionOrbit> {
    let space = AmbientSpace::euclidean(q_minus.len());
    let mut o = connect(h, &space, q_minus, q_plus_lift, orbit.energy, &orbit.guess(h), &Symbol::empty())?;
    o.label = orbit.label.clone();
    Ok(o)
}

/// Integrate the closed-form orbit's initial data and report the endpoint
/// miss distance.
pub fn integrator_cross_check(h: &ClassicalHamiltonian, orbit: &CollisionOrbit) -> Result<f64> {
    let s0 = PhaseState::new(orbit.q_minus.clone(), orbit.p_minus.clone());
    let end = dynamics::flow_segment(h, &s0, orbit.duration)?.pop().expect("nonempty trajectory");
    Ok((end.q - &orbit.q_plus).norm())
}

#[derive(Debug, Clone)]
pub struct MomentaReport {
    /// `-∂S/∂q₋` by central differences.
    pub fd_p_minus: DVector<f64>,
    /// `∂S/∂q₊` by central differences.
    pub fd_p_plus: DVector<f64>,
    pub max_rel_deviation: f64,
}

/// Compare the orbit's momenta with central differences of the action.
pub fn boundary_momenta_check(h: &ClassicalHamiltonian, orbit: &CollisionOrbit) -> Result<MomentaReport> {
    let d = orbit.q_minus.len();
    let scale = 1.0 + orbit.q_minus.amax().max(orbit.q_plus.amax());
    let step = if orbit.backend == Backend::FreeFlight { 1e-5 * scale } else { 1e-4 * scale };
    let action = |qm: &DVector<f64>, qp: &DVector<f64>| -> Result<f64> { Ok(reconnect(h, orbit, qm, qp)?.action) };
    let mut fd_m = DVector::zeros(d);
    let mut fd_p = DVector::zeros(d);
    for i in 0..d {
        let mut a = orbit.q_minus.clone();
        let mut b = orbit.q_minus.clone();
        a[i] += step;
        b[i] -= step;
        fd_m[i] = -(action(&a, &orbit.q_plus)? - action(&b, &orbit.q_plus)?) / (2.0 * step);
        let mut a = orbit.q_plus.clone();
        let mut b = orbit.q_plus.clone();
        a[i] += step;
        b[i] -= step;
        fd_p[i] = (action(&orbit.q_minus, &a)? - action(&orbit.q_minus, &b)?) / (2.0 * step);
    }
    let norm = orbit.p_minus.amax().max(orbit.p_plus.amax()).max(1e-300);
    let dev = (&fd_m - &orbit.p_minus).amax().max((&fd_p - &orbit.p_plus).amax()) / norm;
    Ok(MomentaReport { fd_p_minus: fd_m, fd_p_plus: fd_p, max_rel_deviation: dev })
}

/// Mixed second derivative of the action, stored as `B[j][i] = ∂²S/∂q₊ⱼ∂q₋ᵢ`
/// so that `B v₋ = 0` and `Bᵀ v₊ = 0`.
#[derive(Debug, Clone)]
pub struct Twist {
    pub matrix: DMatrix<f64>,
}

impl Twist {
    /// Restriction to `T₋ × T₊` given ambient bases (columns) of the two
    /// tangent subspaces: `T₊ᵀ B T₋`.
    pub fn restricted(&self, t_minus: &DMatrix<f64>, t_plus: &DMatrix<f64>) -> DMatrix<f64> {
        t_plus.transpose() * &self.matrix * t_minus
    }

    /// Determinant of the restricted form, or `None` if it is not square.
    pub fn restricted_det(&self, t_minus: &DMatrix<f64>, t_plus: &DMatrix<f64>) -> Option<f64> {
        let r = self.restricted(t_minus, t_plus);
        r.is_square().then(|| r.determinant())
    }
}

pub fn twist(h: &ClassicalHamiltonian, orbit: &CollisionOrbit) -> Result<Twist> {
    match orbit.backend {
        Backend::FreeFlight => {
            let d = &orbit.q_plus - &orbit.q_minus;
            let m = h.mass();
            let len = h.velocity_norm(&d);
            let c = (2.0 * (orbit.energy - h.potential_at(&orbit.q_minus)?)).sqrt();
            let md = m * &d;
            // p₊ = c M d / |d|_M and d = q₊ − q₋
            let dp = (m / len - &md * md.transpose() / (len * len * len)) * c;
            Ok(Twist { matrix: -dp })
        }
        Backend::Shooting => {
            let dim = orbit.q_minus.len();
            let step = 1e-4 * (1.0 + orbit.q_minus.amax());
            let mut cols = Vec::with_capacity(dim);
            for i in 0..dim {
                let mut a = orbit.q_minus.clone();
                let mut b = orbit.q_minus.clone();
                a[i] += step;
                b[i] -= step;
                let pa = reconnect(h, orbit, &a, &orbit.q_plus)?.p_plus;
                let pb = reconnect(h, orbit, &b, &orbit.q_plus)?.p_plus;
                cols.push((pa - pb) / (2.0 * step));
            }
            Ok(Twist { matrix: DMatrix::from_columns(&cols) })
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConjugacyReport {
    pub nondegenerate: bool,
    pub smallest_singular_value: f64,
    pub largest_singular_value: f64,
}

/// Nondegeneracy of the shooting sensitivity `∂(q(τ), H)/∂(v₋, τ)`.
pub fn conjugate_test(h: &ClassicalHamiltonian, orbit: &CollisionOrbit) -> Result<ConjugacyReport> {
    conjugate_test_with(h, orbit, 1e-8)
}

pub fn conjugate_test_with(h: &ClassicalHamiltonian, orbit: &CollisionOrbit, rel_tol: f64) -> Result<ConjugacyReport> {
    let d = orbit.q_minus.len();
    let v = orbit.v_minus(h);
    let mut z = DVector::zeros(d + 1);
    z.rows_mut(0, d).copy_from(&v);
    z[d] = orbit.duration;
    let steps = if orbit.steps > 0 { orbit.steps } else { dynamics::step_count(&StepPolicy::default(), orbit.duration) };
    let step = 1e-6 * (1.0 + v.amax().max(orbit.duration));
    let jac = shooting_jacobian(h, &orbit.q_minus, &orbit.q_plus, orbit.energy, &z, steps, step);
    if jac.iter().any(|x| !x.is_finite()) {
        return Err(BvpError::Dynamics(DynamicsError::Invalid("shooting map undefined near orbit".into())));
    }
    let s = jac.singular_values();
    let (lo, hi) = (s.min(), s.max());
    Ok(ConjugacyReport { nondegenerate: lo > rel_tol * hi, smallest_singular_value: lo, largest_singular_value: hi })
}

/// Value and first derivatives of one branch of the two-point action.
#[derive(Debug, Clone)]
pub struct ActionJet {
    pub value: f64,
    /// `∂S/∂q₋ = −p₋`.
    pub grad_minus: DVector<f64>,
    /// `∂S/∂q₊ = p₊`.
    pub grad_plus: DVector<f64>,
}

/// Second derivatives of the action; `pm[j][i] = ∂²S/∂q₊ⱼ∂q₋ᵢ` is the twist.
#[derive(Debug, Clone)]
pub struct ActionHessian {
    pub mm: DMatrix<f64>,
    pub pp: DMatrix<f64>,
    pub pm: DMatrix<f64>,
}

/// A multivalued two-point action `S_k(q₋, q₊)` on the ambient space.
pub trait TwoPointAction: Send + Sync {
    fn ambient_dim(&self) -> usize;
    fn energy(&self) -> f64;
    fn action(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<ActionJet>;

    /// Defaults to Richardson-extrapolated differences of the gradients.
    fn action_hessian(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<ActionHessian> {
        let d = qm.len();
        let mut z = DVector::zeros(2 * d);
        z.rows_mut(0, d).copy_from(qm);
        z.rows_mut(d, d).copy_from(qp);
        let step = 1e-3 * (1.0 + z.amax());
        let err = std::cell::Cell::new(None);
        let jac = crate::linalg::richardson_jacobian(
            |y| {
                let a = y.rows(0, d).into_owned();
                let b = y.rows(d, d).into_owned();
                match self.action(k, &a, &b) {
                    Ok(j) => {
                        let mut g = DVector::zeros(2 * d);
                        g.rows_mut(0, d).copy_from(&j.grad_minus);
                        g.rows_mut(d, d).copy_from(&j.grad_plus);
                        g
                    }
                    Err(e) => {
                        err.set(Some(e));
                        DVector::from_element(2 * d, f64::NAN)
                    }
                }
            },
            &z,
            step,
        );
        if let Some(e) = err.take() {
            return Err(e);
        }
        let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
        Ok(ActionHessian {
            mm: sym(jac.view((0, 0), (d, d)).into_owned()),
            pp: sym(jac.view((d, d), (d, d)).into_owned()),
            pm: (jac.view((d, 0), (d, d)) + jac.view((0, d), (d, d)).transpose()) * 0.5,
        })
    }

    /// The same action for the ε-billiard when walls move inward by `eps`.
    fn with_wall_margin(&self, _eps: f64) -> Option<Box<dyn TwoPointAction>> {
        None
    }

    /// Sampled path of the connecting orbit, for diagnostics and plots.
    fn path(&self, _k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        Ok(vec![qm.clone(), qp.clone()])
    }
}

fn free_hessian(mass: &DMatrix<f64>, delta: &DVector<f64>, c: f64) -> DMatrix<f64> {
    let md = mass * delta;
    let len = delta.dot(&md).sqrt();
    (mass / len - &md * md.transpose() / (len * len * len)) * c
}

/// Straight-line action `√(2(E − W₀)) |Δ|_M` for a constant potential on
/// Euclidean space or a flat torus. On a torus the symbol is the winding.
#[derive(Debug, Clone)]
pub struct FreeFlightAction {
    mass: DMatrix<f64>,
    space: AmbientSpace,
    energy: f64,
    speed: f64,
}

impl FreeFlightAction {
    pub fn new(h: &ClassicalHamiltonian, space: AmbientSpace, energy: f64) -> Result<Self> {
        if !h.is_free() || h.dim() != space.dim() {
            return Err(BvpError::Dynamics(DynamicsError::Invalid("free flight needs a constant potential and no magnetic term".into())));
        }
        let w = h.potential_at(&DVector::zeros(h.dim()))?;
        if w >= energy {
            return Err(BvpError::EnergyInfeasible { potential: w, energy });
        }
        Ok(Self { mass: h.mass().clone(), space, energy, speed: (2.0 * (energy - w)).sqrt() })
    }

    pub fn space(&self) -> &AmbientSpace {
        &self.space
    }

    fn delta(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.space.displacement(qm, qp, k.as_slice());
        if d.norm() == 0.0 {
            return Err(BvpError::ZeroLength);
        }
        Ok(d)
    }
}

impl TwoPointAction for FreeFlightAction {
    fn ambient_dim(&self) -> usize {
        self.space.dim()
    }

    fn energy(&self) -> f64 {
        self.energy
    }

    fn action(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<ActionJet> {
        let d = self.delta(k, qm, qp)?;
        let md = &self.mass * &d;
        let len = d.dot(&md).sqrt();
        let p = md * (self.speed / len);
        Ok(ActionJet { value: self.speed * len, grad_minus: -&p, grad_plus: p })
    }

    fn action_hessian(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<ActionHessian> {
        let h = free_hessian(&self.mass, &self.delta(k, qm, qp)?, self.speed);
        Ok(ActionHessian { mm: h.clone(), pm: -&h, pp: h })
    }

    fn path(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let d = self.delta(k, qm, qp)?;
        Ok(vec![qm.clone(), qm + d])
    }
}

/// Free flight inside a rectangular box `Π [αᵢ, βᵢ]` with elastic walls,
/// by unfolding. The symbol holds one reflection index per coordinate:
/// coordinate `i` of `q₊` is replaced by its image in the `nᵢ`-th copy of
/// the interval. Requires a diagonal mass matrix.
#[derive(Debug, Clone)]
pub struct BoxAction {
    mass: DMatrix<f64>,
    walls: Vec<(f64, f64)>,
    energy: f64,
    speed: f64,
}

impl BoxAction {
    pub fn new(h: &ClassicalHamiltonian, walls: Vec<(f64, f64)>, energy: f64) -> Result<Self> {
        let m = h.mass();
        let d = h.dim();
        let diagonal = (0..d).all(|i| (0..d).all(|j| i == j || m[(i, j)] == 0.0));
        if !h.is_free() || !diagonal || walls.len() != d || walls.iter().any(|(a, b)| !(b > a)) {
            return Err(BvpError::Dynamics(DynamicsError::Invalid(
                "box action needs free motion, a diagonal mass and one proper interval per coordinate".into(),
            )));
        }
        let w = h.potential_at(&DVector::zeros(d))?;
        if w >= energy {
            return Err(BvpError::EnergyInfeasible { potential: w, energy });
        }
        Ok(Self { mass: m.clone(), walls, energy, speed: (2.0 * (energy - w)).sqrt() })
    }

    pub fn walls(&self) -> &[(f64, f64)] {
        &self.walls
    }

    /// Image of `y` in copy `n` of `[α, β]`, and its derivative `±1`.
    pub fn unfold(alpha: f64, beta: f64, y: f64, n: i64) -> (f64, f64) {
        let w = beta - alpha;
        let u = y - alpha;
        if n.rem_euclid(2) == 0 {
            (alpha + n as f64 * w + u, 1.0)
        } else {
            (alpha + n as f64 * w + (w - u), -1.0)
        }
    }

    fn unfolded(&self, k: &Symbol, qp: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = qp.len();
        if k.0.len() != d {
            return Err(BvpError::Dynamics(DynamicsError::Invalid(format!("box symbol needs {d} reflection indices"))));
        }
        let mut img = DVector::zeros(d);
        let mut sign = DVector::zeros(d);
        for i in 0..d {
            let (a, b) = self.walls[i];
            let (y, s) = Self::unfold(a, b, qp[i], k.0[i]);
            img[i] = y;
            sign[i] = s;
        }
        Ok((img, sign))
    }

    /// Number of wall hits along each coordinate for symbol `k`.
    pub fn wall_hits(k: &Symbol) -> Vec<u64> {
        k.0.iter().map(|n| n.unsigned_abs()).collect()
    }
}

impl TwoPointAction for BoxAction {
    fn ambient_dim(&self) -> usize {
        self.walls.len()
    }

    fn energy(&self) -> f64 {
        self.energy
    }

    fn with_wall_margin(&self, eps: f64) -> Option<Box<dyn TwoPointAction>> {
        let mut b = self.clone();
        b.walls = self.walls.iter().map(|(a, c)| (a + eps, c - eps)).collect();
        Some(Box::new(b))
    }

    fn action(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<ActionJet> {
        let (img, sign) = self.unfolded(k, qp)?;
        let d = img - qm;
        let md = &self.mass * &d;
        let len = d.dot(&md).sqrt();
        if len == 0.0 {
            return Err(BvpError::ZeroLength);
        }
        let p = md * (self.speed / len);
        Ok(ActionJet { value: self.speed * len, grad_plus: p.component_mul(&sign), grad_minus: -p })
    }

    fn action_hessian(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<ActionHessian> {
        let (img, sign) = self.unfolded(k, qp)?;
        let d = img - qm;
        if d.norm() == 0.0 {
            return Err(BvpError::ZeroLength);
        }
        let h = free_hessian(&self.mass, &d, self.speed);
        let s = DMatrix::from_diagonal(&sign);
        Ok(ActionHessian { mm: h.clone(), pp: &s * &h * &s, pm: -(&s * h) })
    }

    /// Folded polyline through every wall hit.
    fn path(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let (img, _) = self.unfolded(k, qp)?;
        let d = &img - qm;
        let mut ts = vec![0.0, 1.0];
        for i in 0..d.len() {
            let (a, b) = self.walls[i];
            let w = b - a;
            let (lo, hi) = (qm[i].min(img[i]), qm[i].max(img[i]));
            let mut m = ((lo - a) / w).ceil() as i64;
            while a + m as f64 * w <= hi {
                let t = (a + m as f64 * w - qm[i]) / d[i];
                if t > 0.0 && t < 1.0 {
                    ts.push(t);
                }
                m += 1;
            }
        }
        ts.sort_by(f64::total_cmp);
        Ok(ts.into_iter().map(|t| fold_into_box(&self.walls, &(qm + &d * t))).collect())
    }
}

/// Fold an unfolded point back into the box.
pub fn fold_into_box(walls: &[(f64, f64)], y: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(y.len(), |i, _| {
        let (a, b) = walls[i];
        let w = b - a;
        let u = (y[i] - a).rem_euclid(2.0 * w);
        a + if u <= w { u } else { 2.0 * w - u }
    })
}

type GuessFn = dyn Fn(&Symbol, &DVector<f64>, &DVector<f64>) -> ConnectGuess + Send + Sync;

/// Action evaluated by the shooting solver, with a caller-supplied guess
/// for each branch.
pub struct ShootingAction {
    h: ClassicalHamiltonian,
    space: AmbientSpace,
    energy: f64,
    guess: Box<GuessFn>,
}

impl ShootingAction {
    pub fn new(
        h: ClassicalHamiltonian,
        space: AmbientSpace,
        energy: f64,
        guess: impl Fn(&Symbol, &DVector<f64>, &DVector<f64>) -> ConnectGuess + Send + Sync + 'static,
    ) -> Self {
        Self { h, space, energy, guess: Box::new(guess) }
    }

    pub fn orbit(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<CollisionOrbit> {
        connect(&self.h, &self.space, qm, qp, self.energy, &(self.guess)(k, qm, qp), k)
    }
}

impl TwoPointAction for ShootingAction {
    fn ambient_dim(&self) -> usize {
        self.space.dim()
    }

    fn energy(&self) -> f64 {
        self.energy
    }

    fn action(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<ActionJet> {
        let o = self.orbit(k, qm, qp)?;
        Ok(ActionJet { value: o.action, grad_minus: -o.p_minus, grad_plus: o.p_plus })
    }

    fn path(&self, k: &Symbol, qm: &DVector<f64>, qp: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        Ok(self.orbit(k, qm, qp)?.path)
    }
}
