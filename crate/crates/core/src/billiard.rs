//! Ordinary billiards in the complement `Ω_ε` of an ε-tube, and shadowing
//! of degenerate-billiard chains by their orbits.
//!
//! A shadow chain is a critical point of `A^ε = Σ L^ε(q_j, q_{j+1})` with
//! tube points `q_j = ψ(x_j) + ε N(x_j) s_j`. Each direction `s_j` is
//! carried in a chart `ξ ↦ S(ν̄ + Tξ)` of the cross-section's Gauss map,
//! re-centered after every Newton step.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bvp::{BvpError, Symbol, TwoPointAction};
use crate::dls::{window_chain, Boundary, ChainConfiguration, DiscreteLagrangian, Dls, DlsError, End, Site};
use crate::dynamics::{self, ClassicalHamiltonian, DynamicsError, PhaseState, StepPolicy};
use crate::linalg::{richardson_jacobian, BlockTridiagonal, LinalgError};
use crate::scatterer::{ChainPoint, Scatterer, ScattererError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BilliardError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error(transparent)]
    Scatterer(#[from] ScattererError),
    #[error(transparent)]
    Dls(#[from] DlsError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("tangential incidence")]
    Tangential,
    #[error("grazing event at t = {t}")]
    Grazing { t: f64 },
    #[error("link grazes the tube at chain point {index}")]
    GrazingLink { index: usize },
    #[error("time step underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("no momentum jump at chain point {index}")]
    Inadmissible { index: usize },
    #[error("shadow Newton did not converge: residual {residual:e} after {iterations} iterations")]
    Divergence { residual: f64, iterations: usize },
    #[error("periodic orbit does not close: error {error:e}")]
    NotClosed { error: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, BilliardError>;

/// Elastic reflection of `p` at a surface with conormal `n`.
pub fn reflect(h: &ClassicalHamiltonian, q: &DVector<f64>, p: &DVector<f64>, n: &DVector<f64>) -> Result<DVector<f64>> {
    let u = p - h.magnetic_ref().value(q);
    let minv = h.mass_inv();
    let a = n.dot(&(minv * &u));
    let b = n.dot(&(minv * n));
    let scale = (b * u.dot(&(minv * &u))).sqrt();
    if !(b > 0.0) || a.abs() <= 1e-14 * scale {
        return Err(BilliardError::Tangential);
    }
    Ok(p - n * (2.0 * a / b))
}

/// Orthonormal basis of the Euclidean complement of `v`.
pub fn complement(v: &DVector<f64>) -> DMatrix<f64> {
    let d = v.len();
    let mut basis: Vec<DVector<f64>> = vec![v / v.norm()];
    for i in 0..d {
        if basis.len() == d {
            break;
        }
        let mut e = DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 });
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&e);
                e.axpy(-c, b, 1.0);
            }
        }
        let n = e.norm();
        if n > 1e-6 {
            basis.push(e / n);
        }
    }
    if d <= 1 {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&basis[1..])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Surface {
    Tube(ChainPoint),
    Wall { axis: usize, upper: bool },
}

/// Signed distance to the nearest boundary surface of `Ω_ε`.
#[derive(Debug, Clone)]
pub struct Gap {
    pub value: f64,
    pub surface: Surface,
    /// Unit normal pointing into `Ω_ε`.
    pub normal: DVector<f64>,
}

/// `Ω_ε`: the complement of the ε-tube, optionally inside a box whose walls
/// are moved inward by ε.
#[derive(Debug, Clone)]
pub struct BilliardDomain {
    pub h: ClassicalHamiltonian,
    pub scatterer: Scatterer,
    pub eps: f64,
    pub walls: Option<Vec<(f64, f64)>>,
}

impl BilliardDomain {
    pub fn new(h: ClassicalHamiltonian, scatterer: Scatterer, eps: f64, walls: Option<Vec<(f64, f64)>>) -> Result<Self> {
        let d = scatterer.ambient_dim();
        if h.dim() != d {
            return Err(BilliardError::Invalid("Hamiltonian and scatterer dimensions differ".into()));
        }
        if !(eps > 0.0 && eps < scatterer.tube_radius()) {
            return Err(BilliardError::Invalid(format!("ε = {eps} must lie in (0, {})", scatterer.tube_radius())));
        }
        if let Some(w) = &walls {
            if w.len() != d || w.iter().any(|(a, b)| !(b - a > 2.0 * eps)) {
                return Err(BilliardError::Invalid("walls need one interval wider than 2ε per coordinate".into()));
            }
            if scatterer.space().is_torus() {
                return Err(BilliardError::Invalid("walls require a Euclidean ambient space".into()));
            }
        }
        Ok(Self { h, scatterer, eps, walls })
    }

    pub fn gap(&self, q: &DVector<f64>) -> Result<Gap> {
        let d = q.len();
        let pr = self.scatterer.nearest(q, None)?;
        let normal = if pr.distance > 0.0 { &pr.offset / pr.distance } else { DVector::zeros(d) };
        let mut best = Gap { value: pr.distance - self.eps, surface: Surface::Tube(pr.base), normal };
        if let Some(walls) = &self.walls {
            for (i, &(a, b)) in walls.iter().enumerate() {
                let e = |s: f64| DVector::from_fn(d, |k, _| if k == i { s } else { 0.0 });
                let lo = q[i] - (a + self.eps);
                if lo < best.value {
                    best = Gap { value: lo, surface: Surface::Wall { axis: i, upper: false }, normal: e(1.0) };
                }
                let hi = (b - self.eps) - q[i];
                if hi < best.value {
                    best = Gap { value: hi, surface: Surface::Wall { axis: i, upper: true }, normal: e(-1.0) };
                }
            }
        }
        Ok(best)
    }

    fn flow(&self, q: &DVector<f64>, p: &DVector<f64>, t: f64, dt: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        if self.h.is_free() {
            Ok((q + self.h.velocity(q, p) * dt, p.clone()))
        } else {
            let (mut q1, mut p1) = (q.clone(), p.clone());
            dynamics::step(&self.h, &mut q1, &mut p1, dt, t)?;
            Ok((q1, p1))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event {
    pub t: f64,
    pub q: DVector<f64>,
    pub p_in: DVector<f64>,
    pub p_out: DVector<f64>,
    pub surface: Surface,
    pub normal: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub events: Vec<Event>,
    /// Every integration sample when requested, else empty.
    pub path: Vec<PhaseState>,
    pub end: PhaseState,
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryOptions {
    pub max_time: f64,
    pub time_tol: f64,
    /// Events with `|⟨v, n⟩| < grazing_tol·‖v‖` are rejected.
    pub grazing_tol: f64,
    pub record_path: bool,
}

impl Default for TrajectoryOptions {
    fn default() -> Self {
        Self { max_time: 1e3, time_tol: 1e-12, grazing_tol: 1e-4, record_path: false }
    }
}

pub fn billiard_trajectory(dom: &BilliardDomain, s0: &PhaseState, n_bounces: usize) -> Result<Trajectory> {
    billiard_trajectory_with(dom, s0, n_bounces, &TrajectoryOptions::default())
}

/// Flow until `n_bounces` reflections or `max_time`. The spatial step is at
/// most `ε/10` near the boundary and half the gap farther away.
pub fn billiard_trajectory_with(
    dom: &BilliardDomain,
    s0: &PhaseState,
    n_bounces: usize,
    opts: &TrajectoryOptions,
) -> Result<Trajectory> {
    let h = &dom.h;
    let (mut q, mut p, mut t) = (s0.q.clone(), s0.p.clone(), s0.t);
    let t_end = t + opts.max_time;
    let mut g_prev = dom.gap(&q)?.value;
    if g_prev < -1e-9 * (1.0 + dom.eps) {
        return Err(BilliardError::Invalid("initial state lies inside the tube".into()));
    }
    let dt_max = if h.is_free() { f64::INFINITY } else { 1.0 / StepPolicy::default().steps_per_unit_time };
    let mut events = Vec::new();
    let mut path = Vec::new();
    if opts.record_path {
        path.push(PhaseState { q: q.clone(), p: p.clone(), t });
    }
    while events.len() < n_bounces && t < t_end {
        let speed = h.velocity(&q, &p).norm();
        let ds = (0.5 * g_prev).max(0.1 * dom.eps);
        let dt = (ds / speed).min(dt_max).min(t_end - t);
        if !(dt > 1e-300) {
            return Err(BilliardError::StepUnderflow { t });
        }
        let (q1, p1) = dom.flow(&q, &p, t, dt)?;
        let g1 = dom.gap(&q1)?.value;
        if g_prev > 0.0 && g1 <= 0.0 {
            let (mut lo, mut hi) = (0.0, dt);
            while hi - lo > opts.time_tol {
                let mid = 0.5 * (lo + hi);
                if dom.gap(&dom.flow(&q, &p, t, mid)?.0)?.value > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mut tau = 0.5 * (lo + hi);
            for _ in 0..3 {
                let (qm, pm) = dom.flow(&q, &p, t, tau)?;
                let g = dom.gap(&qm)?;
                let rate = g.normal.dot(&h.velocity(&qm, &pm));
                let next = tau - g.value / rate;
                if !next.is_finite() || (next - tau).abs() > opts.time_tol {
                    break;
                }
                tau = next;
            }
            let (qe, pe) = dom.flow(&q, &p, t, tau)?;
            let g = dom.gap(&qe)?;
            let v = h.velocity(&qe, &pe);
            if g.normal.dot(&v).abs() < opts.grazing_tol * v.norm() {
                return Err(BilliardError::Grazing { t: t + tau });
            }
            let p_out = reflect(h, &qe, &pe, &g.normal)?;
            t += tau;
            events.push(Event { t, q: qe.clone(), p_in: pe, p_out: p_out.clone(), surface: g.surface, normal: g.normal });
            q = qe;
            p = p_out;
            g_prev = g.value;
        } else {
            q = q1;
            p = p1;
            t += dt;
            g_prev = g1;
        }
        if opts.record_path {
            path.push(PhaseState { q: q.clone(), p: p.clone(), t });
        }
    }
    Ok(Trajectory { events, path, end: PhaseState { q, p, t } })
}

/// The first `n` reflections at the tube, passing through wall reflections.
pub fn tube_events(dom: &BilliardDomain, s0: &PhaseState, n: usize, opts: &TrajectoryOptions) -> Result<Vec<Event>> {
    let mut out = Vec::with_capacity(n);
    let mut s = s0.clone();
    let t_end = s0.t + opts.max_time;
    while out.len() < n && s.t < t_end {
        let o = TrajectoryOptions { max_time: t_end - s.t, record_path: false, ..*opts };
        let tr = billiard_trajectory_with(dom, &s, 1, &o)?;
        match tr.events.into_iter().next() {
            Some(e) => {
                s = PhaseState { q: e.q.clone(), p: e.p_out.clone(), t: e.t };
                if matches!(e.surface, Surface::Tube(_)) {
                    out.push(e);
                }
            }
            None => break,
        }
    }
    Ok(out)
}

/// The link action for the ε-billiard: the walls, if any, move inward by ε.
fn eps_action<'a, A: TwoPointAction>(dl: &'a Dls<A>, owned: &'a Option<Box<dyn TwoPointAction>>) -> &'a dyn TwoPointAction {
    match owned {
        Some(b) => b.as_ref(),
        None => &dl.action,
    }
}

/// `L^ε_k` between the tube points `f(x₋, εs₋)` and `f(x₊, εs₊)`.
#[allow(clippy::too_many_arguments)]
pub fn generating_eps<A: TwoPointAction>(
    dl: &Dls<A>,
    k: &Symbol,
    x_minus: &ChainPoint,
    s_minus: &DVector<f64>,
    x_plus: &ChainPoint,
    s_plus: &DVector<f64>,
    eps: f64,
) -> Result<f64> {
    let owned = dl.action.with_wall_margin(eps);
    let act = eps_action(dl, &owned);
    let qm = dl.scatterer.tube_point(x_minus, s_minus, eps)?;
    let qp = dl.scatterer.tube_point(x_plus, s_plus, eps)?;
    Ok(act.action(k, &qm, &qp)?.value)
}

#[derive(Debug, Clone, Copy)]
pub struct ShadowOptions {
    /// Terminal residual relative to `√(2E)`.
    pub tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub fd_step: f64,
    pub grazing_tol: f64,
}

impl Default for ShadowOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iterations: 50, max_halvings: 40, fd_step: 1e-4, grazing_tol: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct ShadowLink {
    pub symbol: Symbol,
    pub from: DVector<f64>,
    pub to: DVector<f64>,
    pub action: f64,
    pub p_minus: DVector<f64>,
    pub p_plus: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ShadowChain {
    /// Base points `x_j` with the code and boundary of the shadowed chain.
    pub chain: ChainConfiguration,
    /// `s_j` in normal-frame coordinates, one per point of `chain`.
    pub directions: Vec<DVector<f64>>,
    pub eps: f64,
    pub tube_points: Vec<DVector<f64>>,
    pub links: Vec<ShadowLink>,
    pub action: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone)]
struct Chart {
    base: ChainPoint,
    nu: DVector<f64>,
    t: DMatrix<f64>,
}

impl Chart {
    fn new(sc: &Scatterer, base: ChainPoint, s: &DVector<f64>) -> Self {
        let nu = sc.cross_section().outward_normal(s);
        let t = complement(&nu);
        Self { base, nu, t }
    }

    fn m(&self) -> usize {
        self.base.coords.len()
    }

    fn dim(&self) -> usize {
        self.m() + self.t.ncols()
    }

    fn origin(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, self.m()).copy_from(&self.base.coords);
        z
    }

    fn split(&self, z: &DVector<f64>) -> (ChainPoint, DVector<f64>) {
        let m = self.m();
        (ChainPoint::new(self.base.component, z.rows(0, m).into_owned()), z.rows(m, z.len() - m).into_owned())
    }

    fn nu_at(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.nu + &self.t * xi
    }
}

/// `A^ε` over a chain whose free points carry `(x, ξ)` chart variables.
struct EpsProblem<'a> {
    sc: &'a Scatterer,
    act: &'a dyn TwoPointAction,
    chain: ChainConfiguration,
    dirs: Vec<DVector<f64>>,
    eps: f64,
    charts: Vec<Chart>,
    fd_step: f64,
}

struct LinkEval {
    value: f64,
    q_left: DVector<f64>,
    q_right: DVector<f64>,
    grad_minus: DVector<f64>,
    grad_plus: DVector<f64>,
}

impl<'a> EpsProblem<'a> {
    fn new(sc: &'a Scatterer, act: &'a dyn TwoPointAction, chain: ChainConfiguration, dirs: Vec<DVector<f64>>, eps: f64, fd_step: f64) -> Self {
        let charts = chain.free_indices().map(|i| Chart::new(sc, chain.points[i].clone(), &dirs[i])).collect();
        Self { sc, act, chain, dirs, eps, charts, fd_step }
    }

    fn origin(&self) -> Vec<DVector<f64>> {
        self.charts.iter().map(Chart::origin).collect()
    }

    fn q_free(&self, i: usize, z: &DVector<f64>) -> Result<DVector<f64>> {
        let c = &self.charts[i];
        let (x, xi) = c.split(z);
        let s = self.sc.cross_section().support_point(&c.nu_at(&xi));
        Ok(self.sc.tube_point(&x, &s, self.eps)?)
    }

    /// `∂q/∂z`, `d × dim`.
    fn dq_free(&self, i: usize, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let c = &self.charts[i];
        let (x, xi) = c.split(z);
        let m = c.m();
        let d = self.sc.ambient_dim();
        let section = self.sc.cross_section();
        let s = section.support_point(&c.nu_at(&xi));
        let mut out = DMatrix::zeros(d, c.dim());
        if m > 0 {
            let jx = if self.sc.is_linear() {
                self.sc.jacobian(&x)?
            } else {
                let comp = x.component;
                richardson_jacobian(
                    |y| {
                        self.sc
                            .tube_point(&ChainPoint::new(comp, y.clone()), &s, self.eps)
                            .unwrap_or_else(|_| DVector::from_element(d, f64::NAN))
                    },
                    &x.coords,
                    1e-4,
                )
            };
            out.columns_mut(0, m).copy_from(&jx);
        }
        if c.t.ncols() > 0 {
            let normal = self.sc.frames(&x)?.normal;
            let js = normal * section.support_jacobian(&c.nu_at(&xi)) * &c.t * self.eps;
            out.columns_mut(m, c.t.ncols()).copy_from(&js);
        }
        Ok(out)
    }

    fn q_end(&self, e: &End, z: &[DVector<f64>], left: bool) -> Result<DVector<f64>> {
        match e {
            End::Free(i) => self.q_free(*i, &z[*i]),
            End::Frozen(Site::Ambient(a)) => Ok(a.clone()),
            End::Frozen(Site::Chart(p)) => {
                let idx = if left { 0 } else { self.chain.points.len() - 1 };
                Ok(self.sc.tube_point(p, &self.dirs[idx], self.eps)?)
            }
        }
    }

    fn eval(&self, code: usize, left: &End, right: &End, z: &[DVector<f64>]) -> Result<LinkEval> {
        let q_left = self.q_end(left, z, true)?;
        let q_right = self.q_end(right, z, false)?;
        let jet = self.act.action(&self.chain.code[code], &q_left, &q_right).map_err(|e| {
            BilliardError::Dls(DlsError::Link { index: code, message: e.to_string() })
        })?;
        Ok(LinkEval { value: jet.value, q_left, q_right, grad_minus: jet.grad_minus, grad_plus: jet.grad_plus })
    }

    fn action(&self, z: &[DVector<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for l in self.chain.links() {
            total += self.eval(l.code, &l.left, &l.right, z)?.value;
        }
        Ok(total)
    }

    fn residual(&self, z: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut r: Vec<DVector<f64>> = self.charts.iter().map(|c| DVector::zeros(c.dim())).collect();
        for l in self.chain.links() {
            let ev = self.eval(l.code, &l.left, &l.right, z)?;
            if let End::Free(i) = l.left {
                r[i] += self.dq_free(i, &z[i])?.transpose() * &ev.grad_minus;
            }
            if let End::Free(j) = l.right {
                r[j] += self.dq_free(j, &z[j])?.transpose() * &ev.grad_plus;
            }
        }
        Ok(r)
    }

    fn hessian(&self, z: &[DVector<f64>]) -> Result<BlockTridiagonal> {
        let dims: Vec<usize> = self.charts.iter().map(Chart::dim).collect();
        let n = dims.len();
        let cyclic = self.chain.boundary == Boundary::Periodic;
        let mut diag: Vec<DMatrix<f64>> = dims.iter().map(|&m| DMatrix::zeros(m, m)).collect();
        let nlower = if cyclic { n } else { n.saturating_sub(1) };
        let mut lower: Vec<DMatrix<f64>> = (0..nlower).map(|i| DMatrix::zeros(dims[(i + 1) % n], dims[i])).collect();
        for l in self.chain.links() {
            let mut ids: Vec<usize> = Vec::new();
            for e in [&l.left, &l.right] {
                if let End::Free(i) = e {
                    if !ids.contains(i) {
                        ids.push(*i);
                    }
                }
            }
            if ids.is_empty() {
                continue;
            }
            let offs: Vec<usize> = ids.iter().scan(0, |acc, &i| {
                let o = *acc;
                *acc += dims[i];
                Some(o)
            }).collect();
            let total: usize = ids.iter().map(|&i| dims[i]).sum();
            let w0 = BlockTridiagonal::join(&ids.iter().map(|&i| z[i].clone()).collect::<Vec<_>>());
            let f = |w: &DVector<f64>| -> DVector<f64> {
                let mut zz = z.to_vec();
                for (k, &i) in ids.iter().enumerate() {
                    zz[i] = w.rows(offs[k], dims[i]).into_owned();
                }
                let mut g = DVector::zeros(total);
                let ev = match self.eval(l.code, &l.left, &l.right, &zz) {
                    Ok(ev) => ev,
                    Err(_) => return DVector::from_element(total, f64::NAN),
                };
                for (e, grad) in [(&l.left, &ev.grad_minus), (&l.right, &ev.grad_plus)] {
                    if let End::Free(i) = e {
                        let k = ids.iter().position(|x| x == i).unwrap_or(0);
                        match self.dq_free(*i, &zz[*i]) {
                            Ok(dq) => {
                                let part = dq.transpose() * grad;
                                let mut rows = g.rows_mut(offs[k], dims[*i]);
                                rows += part;
                            }
                            Err(_) => return DVector::from_element(total, f64::NAN),
                        }
                    }
                }
                g
            };
            let jac = richardson_jacobian(f, &w0, self.fd_step);
            if jac.iter().any(|v| !v.is_finite()) {
                return Err(BilliardError::Dls(DlsError::Link { index: l.code, message: "Hessian evaluation failed".into() }));
            }
            for (ka, &a) in ids.iter().enumerate() {
                diag[a] += jac.view((offs[ka], offs[ka]), (dims[a], dims[a]));
            }
            if let (End::Free(i), End::Free(j)) = (&l.left, &l.right) {
                if i != j {
                    let (ki, kj) = (0, 1);
                    if *j == (i + 1) % n && *i < nlower {
                        lower[*i] += jac.view((offs[kj], offs[ki]), (dims[*j], dims[*i]));
                    } else {
                        return Err(BilliardError::Invalid(format!("link {} couples non-adjacent points", l.code)));
                    }
                }
            }
        }
        Ok(BlockTridiagonal::new(diag, lower, cyclic)?)
    }

    /// Move every chart to the current point and reset `ξ = 0`.
    fn recenter(&mut self, z: &[DVector<f64>]) {
        let start = self.chain.free_indices().start;
        for (i, zi) in z.iter().enumerate() {
            let c = &self.charts[i];
            let (x, xi) = c.split(zi);
            let s = self.sc.cross_section().support_point(&c.nu_at(&xi));
            self.chain.points[start + i] = x.clone();
            self.dirs[start + i] = s.clone();
            self.charts[i] = Chart::new(self.sc, x, &s);
        }
    }
}

fn norm_all(r: &[DVector<f64>]) -> f64 {
    r.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt()
}

/// `Δp_j = p_j^out − p_j^in` at every free point that has two links.
fn momentum_jumps<A: TwoPointAction>(dl: &Dls<A>, c: &ChainConfiguration) -> Result<Vec<Option<DVector<f64>>>> {
    let n = c.free_count();
    let mut pin: Vec<Option<DVector<f64>>> = vec![None; n];
    let mut pout: Vec<Option<DVector<f64>>> = vec![None; n];
    for l in c.links() {
        let (pm, pp) = dl
            .link_momenta(&c.code[l.code], &c.site(&l.left), &c.site(&l.right))?
            .ok_or_else(|| BilliardError::Invalid("backend does not provide momenta".into()))?;
        if let End::Free(i) = l.left {
            pout[i] = Some(pm);
        }
        if let End::Free(j) = l.right {
            pin[j] = Some(pp);
        }
    }
    Ok(pin.into_iter().zip(pout).map(|(a, b)| Some(b? - a?)).collect())
}

/// Directions `s_j* = S(N_jᵀ Δp_j)` maximizing `⟨Δp_j, s⟩`, one per point
/// of `c`. Fails when a jump vanishes.
pub fn predictor<A: TwoPointAction>(dl: &Dls<A>, c: &ChainConfiguration) -> Result<Vec<DVector<f64>>> {
    let jumps = momentum_jumps(dl, c)?;
    let start = c.free_indices().start;
    let tol = 1e-6 * (2.0 * dl.energy().abs()).sqrt();
    let mut dirs = Vec::with_capacity(c.points.len());
    for (i, x) in c.points.iter().enumerate() {
        let normal = dl.scatterer.frames(x)?.normal;
        let jump = i.checked_sub(start).and_then(|j| jumps.get(j).cloned().flatten());
        let Some(dp) = jump else {
            dirs.push(DVector::zeros(normal.ncols()));
            continue;
        };
        let nu = normal.transpose() * dp;
        if nu.norm() <= tol {
            return Err(BilliardError::Inadmissible { index: i });
        }
        dirs.push(dl.scatterer.cross_section().support_point(&nu));
    }
    Ok(dirs)
}

/// Shadow a critical chain `c` by a billiard orbit in `Ω_ε`: predictor,
/// then damped Newton on `A^ε` in the variables `(x_j, s_j)`.
pub fn shadow_solve<A: TwoPointAction>(
    dl: &Dls<A>,
    h: &ClassicalHamiltonian,
    c: &ChainConfiguration,
    eps: f64,
    opts: &ShadowOptions,
) -> Result<ShadowChain> {
    let dirs = predictor(dl, c)?;
    shadow_solve_from(dl, h, c, dirs, eps, opts)
}

/// As [`shadow_solve`], starting from the given bases and directions.
pub fn shadow_solve_from<A: TwoPointAction>(
    dl: &Dls<A>,
    h: &ClassicalHamiltonian,
    c: &ChainConfiguration,
    dirs: Vec<DVector<f64>>,
    eps: f64,
    opts: &ShadowOptions,
) -> Result<ShadowChain> {
    if dirs.len() != c.points.len() {
        return Err(BilliardError::Invalid("one direction per chain point is required".into()));
    }
    if c.boundary == Boundary::Window {
        return Err(BilliardError::Invalid("shadowing needs a fixed or periodic chain".into()));
    }
    let owned = dl.action.with_wall_margin(eps);
    let act = eps_action(dl, &owned);
    let mut prob = EpsProblem::new(&dl.scatterer, act, c.clone(), dirs, eps, opts.fd_step);
    let tol = opts.tol * (2.0 * dl.energy().abs()).sqrt();
    let mut z = prob.origin();
    let mut r = prob.residual(&z)?;
    let mut norm = norm_all(&r);
    let mut it = 0;
    while eps > 0.0 && norm > tol {
        if it >= opts.max_iterations {
            return Err(BilliardError::Divergence { residual: norm, iterations: it });
        }
        it += 1;
        let hess = prob.hessian(&z)?;
        let rhs: Vec<DVector<f64>> = r.iter().map(|v| -v).collect();
        let step = hess.solve(&rhs)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<DVector<f64>> = z.iter().zip(&step).map(|(a, b)| a + b * lambda).collect();
            if let Ok(rt) = prob.residual(&trial) {
                let nt = norm_all(&rt);
                if nt < norm {
                    prob.recenter(&trial);
                    z = prob.origin();
                    r = prob.residual(&z)?;
                    norm = norm_all(&r);
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(BilliardError::Divergence { residual: norm, iterations: it });
        }
    }
    let mut links = Vec::new();
    let mut tube_points: Vec<Option<DVector<f64>>> = vec![None; c.points.len()];
    let start = c.free_indices().start;
    let mut pin: Vec<Option<DVector<f64>>> = vec![None; prob.charts.len()];
    let mut pout: Vec<Option<DVector<f64>>> = vec![None; prob.charts.len()];
    for l in prob.chain.links() {
        let ev = prob.eval(l.code, &l.left, &l.right, &z)?;
        let (p_minus, p_plus) = (-&ev.grad_minus, ev.grad_plus.clone());
        if let End::Free(i) = l.left {
            tube_points[start + i] = Some(ev.q_left.clone());
            pout[i] = Some(p_minus.clone());
        }
        if let End::Free(j) = l.right {
            tube_points[start + j] = Some(ev.q_right.clone());
            pin[j] = Some(p_plus.clone());
        }
        links.push(ShadowLink {
            symbol: prob.chain.code[l.code].clone(),
            from: ev.q_left,
            to: ev.q_right,
            action: ev.value,
            p_minus,
            p_plus,
        });
    }
    if eps > 0.0 {
        for (i, chart) in prob.charts.iter().enumerate() {
            let x = &chart.base;
            let normal = dl.scatterer.frames(x)?.normal * dl.scatterer.cross_section().outward_normal(&prob.dirs[start + i]);
            let q = tube_points[start + i].clone().unwrap_or_else(|| dl.scatterer.embed(x).unwrap_or_default());
            for (p, sign) in [(&pout[i], 1.0), (&pin[i], -1.0)] {
                if let Some(p) = p {
                    let v = h.velocity(&q, p);
                    if sign * normal.dot(&v) < opts.grazing_tol * v.norm() {
                        return Err(BilliardError::GrazingLink { index: start + i });
                    }
                }
            }
        }
    }
    let tube_points = tube_points
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.map_or_else(|| dl.scatterer.tube_point(&prob.chain.points[i], &prob.dirs[i], eps), Ok))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ShadowChain {
        action: prob.action(&z)?,
        chain: prob.chain,
        directions: prob.dirs,
        eps,
        tube_points,
        links,
        residual: norm,
        iterations: it,
    })
}

/// Hessian of `A^ε` at a shadow chain in the chart variables `(x, ξ)`.
pub fn shadow_hessian<A: TwoPointAction>(dl: &Dls<A>, sc: &ShadowChain) -> Result<BlockTridiagonal> {
    eps_hessian(dl, sc.chain.clone(), sc.directions.clone(), sc.eps)
}

/// Hessian of `A^ε` over a window of `2w + 1` free points cut from a
/// periodic shadow chain.
pub fn shadow_window_hessian<A: TwoPointAction>(dl: &Dls<A>, sc: &ShadowChain, center: usize, w: usize) -> Result<BlockTridiagonal> {
    let window = window_chain(&sc.chain, center, w)?;
    let n = sc.chain.points.len() as i64;
    let r = w as i64 + 1;
    let dirs = (-r..=r).map(|j| sc.directions[(center as i64 + j).rem_euclid(n) as usize].clone()).collect();
    eps_hessian(dl, window, dirs, sc.eps)
}

fn eps_hessian<A: TwoPointAction>(dl: &Dls<A>, chain: ChainConfiguration, dirs: Vec<DVector<f64>>, eps: f64) -> Result<BlockTridiagonal> {
    let owned = dl.action.with_wall_margin(eps);
    let act = eps_action(dl, &owned);
    let prob = EpsProblem::new(&dl.scatterer, act, chain, dirs, eps, ShadowOptions::default().fd_step);
    prob.hessian(&prob.origin())
}

fn resample(path: &[DVector<f64>], m: usize) -> Vec<DVector<f64>> {
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().copied().unwrap_or(0.0) + (&w[1] - &w[0]).norm());
    }
    let total = cum.last().copied().unwrap_or(0.0);
    (0..=m)
        .map(|i| {
            let s = total * i as f64 / m as f64;
            let k = cum.partition_point(|&c| c < s).clamp(1, path.len().max(2) - 1).min(path.len() - 1);
            if path.len() == 1 || cum[k] == cum[k - 1] {
                return path[k.min(path.len() - 1)].clone();
            }
            let f = (s - cum[k - 1]) / (cum[k] - cum[k - 1]);
            &path[k - 1] + (&path[k] - &path[k - 1]) * f
        })
        .collect()
}

/// Distance from the chain to its shadow: the largest base-point
/// displacement plus the largest deviation between matched link paths.
pub fn shadow_error<A: TwoPointAction>(dl: &Dls<A>, c: &ChainConfiguration, sc: &ShadowChain) -> Result<f64> {
    if c.code != sc.chain.code || c.points.len() != sc.chain.points.len() {
        return Err(BilliardError::Invalid("chain and shadow have different codes".into()));
    }
    let space = dl.scatterer.space();
    let mut base = 0.0_f64;
    for (a, b) in c.points.iter().zip(&sc.chain.points) {
        base = base.max(space.distance(&dl.scatterer.embed(a)?, &dl.scatterer.embed(b)?));
    }
    let owned = dl.action.with_wall_margin(sc.eps);
    let act = eps_action(dl, &owned);
    let mut dev = 0.0_f64;
    for (l, sl) in c.links().iter().zip(&sc.links) {
        let k = &c.code[l.code];
        let qa = dl.ambient(&c.site(&l.left))?;
        let qb = dl.ambient(&c.site(&l.right))?;
        let p0 = resample(&dl.action.path(k, &qa, &qb)?, 64);
        let p1 = resample(&act.path(k, &sl.from, &sl.to)?, 64);
        for (a, b) in p0.iter().zip(&p1) {
            dev = dev.max((a - b).norm());
        }
    }
    Ok(base + dev)
}

fn start_state(sc: &ShadowChain) -> Result<PhaseState> {
    let first = sc.links.first().ok_or_else(|| BilliardError::Invalid("empty shadow chain".into()))?;
    Ok(PhaseState::new(first.from.clone(), first.p_minus.clone()))
}

/// Replay a shadow chain through the event-driven billiard from its first
/// boundary state; returns the largest distance between the recorded
/// events and the remaining tube points.
pub fn replay_error(dom: &BilliardDomain, sc: &ShadowChain) -> Result<f64> {
    let s0 = start_state(sc)?;
    let targets: Vec<DVector<f64>> = sc.links.iter().map(|l| l.to.clone()).collect();
    let n = match sc.chain.boundary {
        Boundary::Fixed { .. } => targets.len() - 1,
        _ => targets.len(),
    };
    let events = tube_events(dom, &s0, n, &TrajectoryOptions::default())?;
    if events.len() < n {
        return Err(BilliardError::NotClosed { error: f64::INFINITY });
    }
    let space = dom.scatterer.space();
    let mut err = 0.0_f64;
    for (e, q) in events.iter().zip(&targets) {
        err = err.max(space.min_image(&(&e.q - q)).norm());
    }
    Ok(err)
}

#[derive(Debug, Clone)]
pub struct LyapunovReport {
    /// Per-bounce exponents, largest first.
    pub exponents: Vec<f64>,
    pub closure_error: f64,
    pub bounces: usize,
}

/// Chart of the boundary section at a post-reflection state: tangent
/// directions of the surface and momentum directions transverse to `p − w`.
struct SectionChart {
    q: DVector<f64>,
    p: DVector<f64>,
    tq: DMatrix<f64>,
    tp: DMatrix<f64>,
}

impl SectionChart {
    fn new(dom: &BilliardDomain, q: &DVector<f64>, p: &DVector<f64>) -> Result<Self> {
        let g = dom.gap(q)?;
        let u = p - dom.h.magnetic_ref().value(q);
        Ok(Self { q: q.clone(), p: p.clone(), tq: complement(&g.normal), tp: complement(&u) })
    }

    fn dim(&self) -> usize {
        self.tq.ncols() + self.tp.ncols()
    }

    fn point(&self, dom: &BilliardDomain, delta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let k = self.tq.ncols();
        let mut q = &self.q + &self.tq * delta.rows(0, k);
        let g = dom.gap(&q)?;
        q -= &g.normal * g.value;
        let h = &dom.h;
        let energy = h.energy(&self.q, &self.p)?;
        let w = h.magnetic_ref().value(&q);
        let u = &self.p + &self.tp * delta.rows(k, delta.len() - k) - &w;
        let kinetic = energy - h.potential_at(&q)?;
        let scale = (2.0 * kinetic / u.dot(&(h.mass_inv() * &u))).sqrt();
        Ok((q, w + u * scale))
    }

    fn coords(&self, dom: &BilliardDomain, q: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        let dq = dom.scatterer.space().min_image(&(q - &self.q));
        let a = self.tq.transpose() * dq;
        let b = self.tp.transpose() * (p - &self.p);
        DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
    }
}

/// Lyapunov exponents of a periodic shadow orbit from the monodromy of the
/// event-to-event map, linearized by differences on the boundary section.
pub fn lyapunov_estimate(dom: &BilliardDomain, sc: &ShadowChain) -> Result<LyapunovReport> {
    if sc.chain.boundary != Boundary::Periodic {
        return Err(BilliardError::Invalid("Lyapunov estimates need a periodic shadow chain".into()));
    }
    let n = sc.links.len();
    let s0 = start_state(sc)?;
    let one = TrajectoryOptions::default();
    let events = tube_events(dom, &s0, n, &one)?;
    if events.len() < n {
        return Err(BilliardError::NotClosed { error: f64::INFINITY });
    }
    let last = &events[n - 1];
    let scale = 1.0 + s0.p.norm();
    let closure = dom.scatterer.space().min_image(&(&last.q - &s0.q)).norm().max((&last.p_out - &s0.p).norm() / scale);
    if closure > 1e-6 {
        return Err(BilliardError::NotClosed { error: closure });
    }
    let mut states = vec![(s0.q.clone(), s0.p.clone())];
    states.extend(events.iter().map(|e| (e.q.clone(), e.p_out.clone())));
    let mut jacs = Vec::with_capacity(n);
    for j in 0..n {
        let from = SectionChart::new(dom, &states[j].0, &states[j].1)?;
        let to = SectionChart::new(dom, &states[j + 1].0, &states[j + 1].1)?;
        let dim = from.dim();
        let k = from.tq.ncols();
        let pn = from.p.norm();
        let hq = 1e-3 * dom.eps;
        let map = |delta: &DVector<f64>| -> DVector<f64> {
            let run = from.point(dom, delta).and_then(|(q, p)| tube_events(dom, &PhaseState::new(q, p), 1, &one));
            match run {
                Ok(ev) if !ev.is_empty() => to.coords(dom, &ev[0].q, &ev[0].p_out),
                _ => DVector::from_element(dim, f64::NAN),
            }
        };
        // rescale the momentum directions so one step size serves both halves
        let scaled = |delta: &DVector<f64>| {
            let mut d = delta.clone();
            for i in k..dim {
                d[i] *= pn;
            }
            let mut out = map(&d);
            for i in k..dim {
                out[i] /= pn;
            }
            out
        };
        let jac = richardson_jacobian(scaled, &DVector::zeros(dim), hq);
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(BilliardError::Invalid(format!("event map linearization failed at link {j}")));
        }
        jacs.push(jac);
    }
    let dim = jacs[0].nrows();
    let periods = 20;
    let mut q = DMatrix::<f64>::identity(dim, dim);
    let mut sums = vec![0.0; dim];
    for _ in 0..periods {
        for jac in &jacs {
            let qr = (jac * &q).qr();
            let r = qr.r();
            let mut qm = qr.q();
            for i in 0..dim {
                sums[i] += r[(i, i)].abs().ln();
                if r[(i, i)] < 0.0 {
                    let mut col = qm.column_mut(i);
                    col *= -1.0;
                }
            }
            q = qm;
        }
    }
    let mut exponents: Vec<f64> = sums.iter().map(|s| s / (periods * n) as f64).collect();
    exponents.sort_by(|a, b| b.total_cmp(a));
    Ok(LyapunovReport { exponents, closure_error: closure, bounces: n })
}
